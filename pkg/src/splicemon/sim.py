"""Deterministic scenarios: scripted apps, scripted servers, virtual time.

A :class:`Scenario` names remote endpoints and a client script. Running it
wires an :class:`~splicemon.appstack.AppStack` to a :class:`~splicemon.relay.Relay`
through a simulated tunnel, with a :class:`~splicemon.network.SimNetwork`
behind the relay, all on one :class:`~splicemon.clock.SimLoop`. Everything
observable is collected into a :class:`TraceBundle`.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import statistics
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from .appstack import AppSocket, AppStack, SockState
from .clock import NS_PER_MS, NS_PER_S, SimLoop
from .diagnostics import build_query
from .flows import MapResolver
from .netio import CaptureWriter, sim_channel
from .network import Behavior, Emission, SimEndpoint, SimNetwork, SimProbe
from .packet import FlowKey, IpProto, PacketError, TcpFlags, flow_key_of, parse_ipv4, parse_tcp, parse_udp, seq_diff
from .records import AppId, FailureRecord, RttSample
from .relay import Relay, RelayConfig
from .rtt import Target, baseline_coarse_connect, time_connect
from .stats import StatsStore

APP_ADDR = "10.0.0.2"
OPS = {"open", "send", "close", "reset", "udp", "dns", "pause_reads", "read"}


class ScenarioInvalid(ValueError):
    pass


@dataclass
class ClientAction:
    at_ns: int
    op: str
    flow: str = ""
    dst: str = ""
    port: int = 0
    sport: int | None = None
    app: str = ""
    data: bytes = b""
    name: str = ""


@dataclass
class Scenario:
    name: str
    endpoints: list[SimEndpoint]
    actions: list[ClientAction]
    seed: int = 0
    network_tag: str = "sim"
    config: dict = field(default_factory=dict)
    tunnel_delay_ns: int = 0
    run_until_ns: int | None = None
    source: dict = field(default_factory=dict, repr=False)

    # -- JSON ------------------------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        try:
            seed = int(d.get("seed", 0))
            rng = random.Random(seed)
            endpoints = [_endpoint(e) for e in d.get("endpoints", [])]
            actions = []
            opened = set()
            for i, a in enumerate(d.get("client", [])):
                op = a.get("op")
                if op not in OPS:
                    raise ScenarioInvalid(f"client[{i}]: unknown op {op!r}")
                if op in ("open",):
                    if not a.get("flow") or not a.get("dst") or not a.get("port"):
                        raise ScenarioInvalid(f"client[{i}]: open needs flow, dst and port")
                    opened.add(a["flow"])
                elif op in ("send", "close", "reset", "pause_reads", "read") and a.get("flow") not in opened:
                    raise ScenarioInvalid(f"client[{i}]: flow {a.get('flow')!r} not opened earlier")
                if op in ("udp", "dns") and not a.get("dst"):
                    raise ScenarioInvalid(f"client[{i}]: {op} needs dst")
                if "text" in a:
                    data = str(a["text"]).encode()
                elif "bytes" in a:
                    data = rng.randbytes(int(a["bytes"]))
                else:
                    data = b""
                if op == "send" and not data:
                    raise ScenarioInvalid(f"client[{i}]: send needs bytes or text")
                actions.append(ClientAction(
                    at_ns=int(round(float(a.get("at_ms", 0)) * NS_PER_MS)),
                    op=op,
                    flow=a.get("flow", ""),
                    dst=a.get("dst", ""),
                    port=int(a.get("port", 53 if op == "dns" else 0)),
                    sport=a.get("sport"),
                    app=a.get("app", ""),
                    data=data,
                    name=a.get("name", ""),
                ))
            until = d.get("run_until_ms")
            return cls(
                name=d.get("name", "scenario"),
                endpoints=endpoints,
                actions=actions,
                seed=seed,
                network_tag=d.get("network_tag", "sim"),
                config=dict(d.get("config", {})),
                tunnel_delay_ns=int(float(d.get("tunnel_delay_us", 0)) * 1000),
                run_until_ns=None if until is None else int(float(until) * NS_PER_MS),
                source=d,
            )
        except ScenarioInvalid:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioInvalid(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ScenarioInvalid(f"{path}: {exc}") from exc

    def relay_config(self) -> RelayConfig:
        c = self.config
        kwargs: dict[str, Any] = {"network_tag": self.network_tag, "iss_seed": self.seed, "trace": True}
        ms = {"connect_timeout_ms": "connect_timeout_ns", "udp_idle_expiry_ms": "udp_idle_expiry_ns",
              "linger_ms": "linger_ns"}
        for k, v in c.items():
            if k in ms:
                kwargs[ms[k]] = int(float(v) * NS_PER_MS)
            elif k in ("max_flows", "per_flow_queue", "mss", "window"):
                kwargs[k] = int(v)
            elif k == "strict_checksums":
                kwargs[k] = bool(v)
            elif k == "bogus_dns":
                kwargs[k] = frozenset(v)
            else:
                raise ScenarioInvalid(f"unknown config key {k!r}")
        try:
            return RelayConfig(**kwargs)
        except ValueError as exc:
            raise ScenarioInvalid(str(exc)) from exc


def _endpoint(e: dict) -> SimEndpoint:
    try:
        behavior = Behavior(e.get("behavior", "ACCEPT"))
    except ValueError as exc:
        raise ScenarioInvalid(f"bad behavior {e.get('behavior')!r}") from exc
    mode = e.get("mode", "dns" if e.get("protocol") == "udp" and e.get("dns_records") is not None else "echo")
    if mode not in ("echo", "sink", "script", "dns"):
        raise ScenarioInvalid(f"bad mode {mode!r}")
    p = float(e.get("drop_probability", 0.0))
    if not 0 <= p <= 1:
        raise ScenarioInvalid("drop_probability outside [0, 1]")
    return SimEndpoint(
        addr=e["addr"],
        port=int(e["port"]),
        behavior=behavior,
        one_way_ns=int(round(float(e.get("one_way_ms", 0)) * NS_PER_MS)),
        mode=mode,
        script=list(e.get("script", [])),
        drop_probability=p,
        seed=int(e.get("seed", 0)),
        protocol=e.get("protocol", "tcp"),
        dns_records={k.lower(): v for k, v in e.get("dns_records", {}).items()},
        label=e.get("label", ""),
    )


def builtin_scenarios() -> dict[str, Path]:
    root = resources.files("splicemon").joinpath("scenarios")
    return {Path(p.name).stem: Path(str(p)) for p in root.iterdir() if p.name.endswith(".json")}


def load_scenario(name_or_path: str | Path) -> Scenario:
    builtins = builtin_scenarios()
    if str(name_or_path) in builtins:
        return Scenario.load(builtins[str(name_or_path)])
    return Scenario.load(name_or_path)


# -- results ------------------------------------------------------------------------------


@dataclass
class FlowResult:
    name: str
    key: FlowKey
    app: str
    state: str
    bytes_sent: int
    bytes_received: int
    received_sha256: str
    eof: bool
    reset: bool
    handshake_ns: int | None
    oracle_rtt_ns: int | None
    syns_sent: int

    def as_dict(self) -> dict:
        d = dict(vars(self))
        d["key"] = str(self.key)
        return d


@dataclass
class AuditReport:
    checked: int
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations


@dataclass
class TraceBundle:
    scenario: str
    seed: int
    samples: list[RttSample]
    failures: list[FailureRecord]
    stats: StatsStore
    counters: dict
    trace: list
    tunnel_log: list[tuple[str, int, bytes]]
    emissions: list[Emission]
    flows: dict[str, FlowResult]
    udp: dict[str, dict]
    end_ns: int

    def summary(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "end_ns": self.end_ns,
            "samples": [s.as_dict() for s in self.samples],
            "failures": [f.as_dict() for f in self.failures],
            "counters": dict(sorted(self.counters.items())),
            "flows": {k: v.as_dict() for k, v in sorted(self.flows.items())},
            "udp": self.udp,
            "emissions": [[e.t_ns, str(e.key), e.kind, e.nbytes, e.origin] for e in self.emissions],
        }

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.summary(), sort_keys=True).encode())
        for ev in self.trace:
            h.update(json.dumps(ev.as_dict(), sort_keys=True).encode())
        for direction, t, raw in self.tunnel_log:
            h.update(f"{direction}{t}".encode() + raw)
        return h.hexdigest()

    def write_pcap(self, path: str | Path) -> None:
        with CaptureWriter(path) as w:
            for _, t, raw in self.tunnel_log:
                w.write(t, raw)

    def dump(self, directory: str | Path) -> dict[str, Path]:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "summary": out / "summary.json",
            "events": out / "events.jsonl",
            "trace": out / "trace.jsonl",
            "pcap": out / "tunnel.pcap",
        }
        summary = self.summary()
        summary["digest"] = self.digest()
        summary["audit"] = {"ok": self.audit().ok, "violations": self.audit().violations}
        paths["summary"].write_text(json.dumps(summary, indent=2) + "\n")
        self.stats.persist(paths["events"])
        with open(paths["trace"], "w") as fh:
            for ev in self.trace:
                fh.write(json.dumps(ev.as_dict()) + "\n")
        self.write_pcap(paths["pcap"])
        return paths

    def audit(self) -> AuditReport:
        return audit_zero_injection(self.tunnel_log, self.emissions)


# -- zero-injection audit -----------------------------------------------------------------


@dataclass
class _ClientFlow:
    syn_at: int
    iss: int
    sent_upto: list = field(default_factory=list)  # (t, cumulative unique bytes)
    stream: bytearray = field(default_factory=bytearray)
    fin_at: int | None = None
    rst_at: int | None = None


def audit_zero_injection(tunnel_log, emissions) -> AuditReport:
    """Check every relay emission against what the apps actually sent.

    TCP SYN, RST and FIN need an app flow (and app FIN) that came first;
    external DATA bytes may never exceed, and must equal, the app's stream
    sent so far; each UDP datagram must match an app datagram on the same key.
    """
    tcp: dict[FlowKey, _ClientFlow] = {}
    udp: dict[FlowKey, list[tuple[int, bytes]]] = {}
    for direction, t, raw in tunnel_log:
        if direction != "app->relay":
            continue
        try:
            pkt = parse_ipv4(raw)
            key = flow_key_of(pkt)
            if pkt.protocol == IpProto.TCP:
                seg = parse_tcp(pkt)
                if seg.has(TcpFlags.SYN) and not seg.has(TcpFlags.ACK):
                    if key not in tcp or tcp[key].rst_at is not None:
                        tcp[key] = _ClientFlow(t, seg.seq)
                    continue
                flow = tcp.get(key)
                if flow is None:
                    continue
                if seg.has(TcpFlags.RST):
                    flow.rst_at = t
                off = seq_diff(seg.seq, flow.iss) - 1
                if seg.payload and off == len(flow.stream):
                    flow.stream += seg.payload
                    flow.sent_upto.append((t, len(flow.stream)))
                if seg.has(TcpFlags.FIN) and flow.fin_at is None:
                    flow.fin_at = t
            else:
                udp.setdefault(key, []).append((t, parse_udp(pkt).payload))
        except PacketError:
            continue
    violations = []
    emitted: dict[FlowKey, int] = {}
    checked = 0
    for e in emissions:
        if e.origin != "relay":
            continue
        checked += 1
        if e.kind == "UDP":
            cands = udp.get(e.key, [])
            match = next((i for i, (t, p) in enumerate(cands) if t <= e.t_ns and (not e.payload or p == e.payload)
                          and len(p) == e.nbytes), None)
            if match is None:
                violations.append(f"{e.t_ns}: UDP {e.key} has no matching app datagram")
            else:
                cands.pop(match)
            continue
        flow = tcp.get(e.key)
        if flow is None or flow.syn_at > e.t_ns:
            violations.append(f"{e.t_ns}: {e.kind} for {e.key} without a prior app SYN")
            continue
        if e.kind == "DATA":
            total = emitted.get(e.key, 0) + e.nbytes
            avail = max((n for t, n in flow.sent_upto if t <= e.t_ns), default=0)
            if total > avail:
                violations.append(f"{e.t_ns}: {total} bytes out on {e.key} but app sent {avail}")
            elif e.payload and bytes(flow.stream[total - e.nbytes:total]) != e.payload:
                violations.append(f"{e.t_ns}: bytes out on {e.key} differ from the app stream")
            emitted[e.key] = total
        elif e.kind == "FIN":
            if flow.fin_at is None or flow.fin_at > e.t_ns:
                violations.append(f"{e.t_ns}: FIN for {e.key} before the app closed")
    return AuditReport(checked, violations)


# -- running ---------------------------------------------------------------------------------


def run_scenario(s: Scenario, keep_payloads: bool = True, record_tunnel: bool = True) -> TraceBundle:
    loop = SimLoop()
    app_end, relay_end = sim_channel(loop, s.tunnel_delay_ns)
    net = SimNetwork(loop, s.endpoints, keep_payloads=keep_payloads)
    stats = StatsStore()
    cfg = s.relay_config()
    tunnel_log: list[tuple[str, int, bytes]] = []
    tap = (lambda d, t, raw: tunnel_log.append((d, t, raw))) if record_tunnel else None

    resolver = MapResolver()
    relay = Relay(loop, relay_end, net, cfg, resolver=resolver, record=stats.record)
    relay.attach()
    stack = AppStack(loop, app_end, APP_ADDR, seed=s.seed, tap=tap)

    sockets: dict[str, AppSocket] = {}
    flow_apps: dict[str, str] = {}
    udp_names: dict[str, FlowKey] = {}

    def do(a: ClientAction) -> None:
        if a.op == "open":
            sport = a.sport or stack.ephemeral_port()
            if a.app:
                resolver.by_port[int(sport)] = AppId(a.app)
            sockets[a.flow] = stack.connect(a.dst, a.port, int(sport))
            flow_apps[a.flow] = a.app or "unknown"
        elif a.op == "send":
            sockets[a.flow].send(a.data)
        elif a.op == "close":
            sockets[a.flow].close()
        elif a.op == "reset":
            sockets[a.flow].reset()
        elif a.op == "pause_reads":
            sockets[a.flow].auto_read = False
        elif a.op == "read":
            sockets[a.flow].read()
        elif a.op in ("udp", "dns"):
            payload = a.data
            if a.op == "dns":
                payload = build_query(a.name, qid=stack.rng.getrandbits(16))
            sport = a.sport
            if sport is None and a.op == "dns":
                sport = stack.ephemeral_port()  # one port per query, as stub resolvers do
            ex = stack.send_udp(a.dst, a.port, payload, sport)
            udp_names[a.flow or str(ex.key)] = ex.key
            if a.app:
                resolver.by_port[ex.key.src_port] = AppId(a.app)

    for a in s.actions:
        loop.call_at(a.at_ns, do, a)
    if s.run_until_ns is not None:
        loop.run(until_ns=s.run_until_ns)
    else:
        loop.run()

    flows = {}
    for name, sock in sockets.items():
        ep = net.endpoint(sock.key.dst_addr, sock.key.dst_port)
        oracle = ep.oracle_rtt_ns if ep is not None and ep.behavior is Behavior.ACCEPT else None
        flows[name] = FlowResult(
            name, sock.key, flow_apps[name], sock.state.value, sock.bytes_sent, len(sock.received),
            sock.digest(), sock.peer_fin, sock.state is SockState.RESET, sock.handshake_ns, oracle, sock.syns_sent,
        )
    udp = {}
    for name, key in udp_names.items():
        ex = stack.udp[key]
        udp[name] = {"key": str(key), "sent": len(ex.sent), "received": len(ex.received),
                     "received_sha256": hashlib.sha256(b"".join(ex.received)).hexdigest()}
    return TraceBundle(
        scenario=s.name,
        seed=s.seed,
        samples=list(relay.samples),
        failures=list(relay.failures),
        stats=stats,
        counters=dict(relay.counters),
        trace=list(relay.trace),
        tunnel_log=tunnel_log,
        emissions=list(net.emissions),
        flows=flows,
        udp=udp,
        end_ns=loop.now_ns(),
    )


# -- randomized scenarios -------------------------------------------------------------------


def random_scenario(seed: int) -> Scenario:
    """A seeded mix of endpoint behaviors and client activity."""
    rng = random.Random(seed)
    endpoints = []
    for i in range(rng.randint(1, 4)):
        behavior = rng.choices(["ACCEPT", "REFUSE", "BLACKHOLE", "DROP", "UNREACHABLE"], [6, 1, 1, 1, 1])[0]
        mode = rng.choice(["echo", "sink", "script"])
        script = []
        if mode == "script":
            for _ in range(rng.randint(1, 3)):
                script.append(rng.choice([["send", rng.randint(1, 4000)], ["wait", rng.randint(1, 50)]]))
            if rng.random() < 0.5:
                script.append(["close"])
        endpoints.append({
            "addr": f"198.51.100.{10 + i}", "port": rng.choice([80, 443, 8080]), "behavior": behavior,
            "one_way_ms": round(rng.uniform(0.2, 150), 3), "mode": mode, "script": script,
            "drop_probability": 0.5, "seed": rng.getrandbits(16),
        })
    endpoints.append({"addr": "8.8.8.8", "port": 53, "protocol": "udp", "one_way_ms": round(rng.uniform(1, 40), 3),
                      "dns_records": {"hkminorshort.weixin.qq.com": ["1.1.1.1"], "www.facebook.com": ["31.13.79.251"]}})
    client = []
    apps = ["facebook", "wechat", "chrome", "whatsapp"]
    t = 0.0
    for f in range(rng.randint(1, 6)):
        ep = rng.choice(endpoints[:-1])
        name = f"f{f}"
        t += rng.uniform(0, 200)
        client.append({"at_ms": round(t, 3), "op": "open", "flow": name, "dst": ep["addr"], "port": ep["port"],
                       "app": rng.choice(apps)})
        tt = t
        if rng.random() < 0.2:
            tt += rng.uniform(0, 400)
            client.append({"at_ms": round(tt, 3), "op": "pause_reads", "flow": name})
        for _ in range(rng.randint(0, 4)):
            tt += rng.uniform(0, 500)
            client.append({"at_ms": round(tt, 3), "op": "send", "flow": name, "bytes": rng.randint(1, 20000)})
        tt += rng.uniform(0, 800)
        end = rng.choices(["close", "reset", "none"], [6, 1, 1])[0]
        if any(c.get("op") == "pause_reads" and c.get("flow") == name for c in client):
            client.append({"at_ms": round(tt, 3), "op": "read", "flow": name})
        if end != "none":
            client.append({"at_ms": round(tt + 1, 3), "op": end, "flow": name})
    for q in range(rng.randint(0, 3)):
        client.append({"at_ms": round(rng.uniform(0, 1000), 3), "op": "dns", "dst": "8.8.8.8", "flow": f"q{q}",
                       "name": rng.choice(["hkminorshort.weixin.qq.com", "www.facebook.com", "nx.example"]),
                       "app": "wechat"})
    if rng.random() < 0.3:
        client.append({"at_ms": round(rng.uniform(0, 1000), 3), "op": "udp", "dst": "203.0.113.9", "port": 9999,
                       "bytes": rng.randint(1, 500)})
    client.sort(key=lambda c: c["at_ms"])
    return Scenario.from_dict({
        "name": f"random-{seed}", "seed": seed, "endpoints": endpoints, "client": client,
        "run_until_ms": 120_000,
    })


# -- accuracy and overhead ----------------------------------------------------------------------


@dataclass(frozen=True)
class Summary:
    n: int
    mean: float
    median: float
    ci_low: float
    ci_high: float
    median_low: float = math.nan
    median_high: float = math.nan

    def as_dict(self) -> dict:
        return dict(vars(self))


def median_rank_interval(n: int, confidence: float = 0.95) -> tuple[int, int]:
    """1-based order-statistic ranks bounding the median at ``confidence``.

    Distribution-free: the count of values below the median is Binomial(n, 1/2).
    Falls back to the extremes when ``n`` is too small to reach ``confidence``.
    """
    from scipy.stats import binom

    lo = int(binom.ppf((1 - confidence) / 2, n, 0.5))
    if lo < 1:
        return 1, n
    return lo, n - lo + 1


def summarize(values, confidence: float = 0.95) -> Summary:
    """Mean with a Student-t interval, plus the median with an order-statistic interval."""
    from scipy.stats import t as student_t

    vals = sorted(float(v) for v in values)
    n = len(vals)
    if n == 0:
        raise ValueError("no values")
    mean = statistics.fmean(vals)
    if n == 1:
        return Summary(1, mean, mean, mean, mean, mean, mean)
    half = float(student_t.ppf((1 + confidence) / 2, n - 1)) * statistics.stdev(vals) / math.sqrt(n)
    lo, hi = median_rank_interval(n, confidence)
    return Summary(n, mean, statistics.median(vals), mean - half, mean + half, vals[lo - 1], vals[hi - 1])


@dataclass
class OverheadResult:
    direct_ms: list[float]
    relayed_ms: list[float]

    @property
    def overhead_ms(self) -> list[float]:
        return [r - d for d, r in zip(self.direct_ms, self.relayed_ms)]

    def summary(self) -> Summary:
        return summarize(self.overhead_ms)


def overhead_experiment(s: Scenario, runs: int = 10, endpoint: int = 0) -> OverheadResult:
    """Direct vs relayed handshake time to one endpoint of ``s``, under virtual time."""
    tcp_eps = [e for e in s.endpoints if e.protocol == "tcp"]
    if not tcp_eps:
        raise ScenarioInvalid("overhead experiment needs a TCP endpoint")
    ep = tcp_eps[endpoint]
    direct, relayed = [], []
    for run in range(runs):
        loop = SimLoop()
        net = SimNetwork(loop, [ep])
        att = SimProbe(net).attempt((ep.addr, ep.port), s.relay_config().connect_timeout_ns)
        direct.append((att.t_end - att.t_start) / NS_PER_MS)
        single = Scenario(
            name=f"{s.name}-overhead-{run}", endpoints=[ep],
            actions=[ClientAction(0, "open", "x", ep.addr, ep.port), ClientAction(0, "close", "x")],
            seed=s.seed + run, config=s.config, tunnel_delay_ns=s.tunnel_delay_ns,
        )
        b = run_scenario(single, record_tunnel=False)
        hs = b.flows["x"].handshake_ns
        relayed.append(float("nan") if hs is None else hs / NS_PER_MS)
    return OverheadResult(direct, relayed)


def accuracy_targets(s: Scenario) -> list[Target]:
    return [Target(e.label or e.addr, e.addr, e.port) for e in s.endpoints
            if e.protocol == "tcp" and e.behavior is Behavior.ACCEPT]


def sim_measure(s: Scenario, meter: str = "direct", pre_connect_ns: int = 12 * NS_PER_MS,
                seed: int = 0):
    """Closure for :func:`~splicemon.rtt.compare_accuracy` over the scenario's endpoints.

    Each run starts at a random sub-millisecond phase so that millisecond
    quantization in the coarse meter varies between runs.
    """
    rng = random.Random(seed)
    timeout = s.relay_config().connect_timeout_ns

    def measure(target: Target) -> tuple[int, int]:
        loop = SimLoop()
        net = SimNetwork(loop, s.endpoints)
        probe = SimProbe(net)
        loop.advance(rng.randrange(NS_PER_MS))
        ep = net.endpoint(target.addr, target.port)
        if meter == "direct":
            sample = time_connect((target.addr, target.port), timeout, probe)
        else:
            sample = baseline_coarse_connect((target.addr, target.port), timeout, probe, pre_connect_ns)
        return ep.oracle_rtt_ns, sample.rtt_ns

    return measure
