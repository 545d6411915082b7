"""Command-line entry point.

Subcommands: ``run`` (live relay on a TUN device), ``replay`` (handshake RTTs
from a capture file), ``simulate`` (scenario on the virtual clock),
``compare`` (direct meter vs coarse baseline) and ``report`` (views and CDF
exports from an event log).

Every flag can also be set through an environment variable named
``SPLICEMON_`` plus the flag name in upper case with dashes as underscores,
for example ``SPLICEMON_TIMEOUT_MS=5000``. Flags on the command line win.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import signal
import sys
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .clock import NS_PER_MS, NS_PER_S

ENV_PREFIX = "SPLICEMON_"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
FORMATS = ("text", "json", "csv")

log = logging.getLogger("splicemon")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _env(name: str, default=None):
    return os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"), default)


def _env_bool(name: str) -> bool:
    return str(_env(name, "")).lower() in ("1", "true", "yes", "on")


@dataclass
class CliConfig:
    command: str
    tunnel_name: str = "splice0"
    address: str = "10.111.0.1/24"
    network_tag: str = "unlabeled"
    timeout_ms: int = 3000
    store_path: str | None = None
    scenario_path: str | None = None
    output_format: str = "text"
    resolver: str = "platform"
    strict_checksums: bool = False
    capture_path: str | None = None
    out_dir: str | None = None
    seed: int | None = None
    runs: int = 10
    mode: str = "sim"
    pre_connect_ms: float = 12.0
    app: str | None = None
    cdf_path: str | None = None
    report_interval: float = 10.0
    duration: float | None = None
    max_flows: int = 4096
    redirect: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.output_format not in FORMATS:
            raise UsageError(f"format must be one of {', '.join(FORMATS)}")
        if self.timeout_ms <= 0:
            raise UsageError("timeout-ms must be positive")
        if not (self.resolver in ("platform", "none") or self.resolver.startswith("map:")):
            raise UsageError("resolver must be platform, none or map:<path>")
        if self.command == "run" and not self.store_path:
            raise UsageError("run needs --store")
        if self.command == "replay" and not self.capture_path:
            raise UsageError("replay needs --capture")
        if self.command == "report" and not self.store_path:
            raise UsageError("report needs --store")
        if self.command == "simulate" and not self.scenario_path:
            raise UsageError("simulate needs --scenario")
        if self.command == "compare" and self.mode not in ("sim", "loopback"):
            raise UsageError("compare --mode must be sim or loopback")
        if self.runs < 1:
            raise UsageError("runs must be at least 1")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="splicemon", description="Per-app connection RTT monitor.")
    p.add_argument("--version", action="version", version=f"splicemon {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, *, store=False, fmt=True):
        if fmt:
            sp.add_argument("--format", dest="output_format", choices=FORMATS, default=_env("format", "text"))
        if store:
            sp.add_argument("--store", dest="store_path", default=_env("store"), help="JSONL event log")

    run = sub.add_parser("run", help="relay a TUN device and monitor live connections")
    common(run, store=True)
    run.add_argument("--tunnel-name", default=_env("tunnel_name", "splice0"))
    run.add_argument("--address", default=_env("address", "10.111.0.1/24"), help="interface CIDR")
    run.add_argument("--network-tag", default=_env("network_tag", "unlabeled"))
    run.add_argument("--timeout-ms", type=int, default=int(_env("timeout_ms", 3000)))
    run.add_argument("--resolver", default=_env("resolver", "platform"), help="platform | none | map:<path>")
    run.add_argument("--strict-checksums", action="store_true", default=_env_bool("strict_checksums"))
    run.add_argument("--report-interval", type=float, default=float(_env("report_interval", 10.0)),
                     help="seconds between all-app views; 0 disables")
    run.add_argument("--duration", type=float, default=_env("duration"), help="stop after this many seconds")
    run.add_argument("--max-flows", type=int, default=int(_env("max_flows", 4096)))
    run.add_argument("--redirect", action="append", default=[], metavar="HOST:PORT=HOST:PORT",
                     help="send connections for one destination elsewhere (testing)")

    rep = sub.add_parser("replay", help="handshake RTTs from a capture file")
    common(rep)
    rep.add_argument("--capture", dest="capture_path", default=_env("capture"))

    simp = sub.add_parser("simulate", help="run a scenario on the virtual clock")
    common(simp)
    simp.add_argument("--scenario", dest="scenario_path", default=_env("scenario"),
                      help="built-in name or JSON path")
    simp.add_argument("--out", dest="out_dir", default=_env("out"), help="directory for the trace bundle")
    simp.add_argument("--seed", type=int, default=_env("seed"))

    cmp_ = sub.add_parser("compare", help="direct meter vs coarse baseline")
    common(cmp_)
    cmp_.add_argument("--scenario", dest="scenario_path", default=_env("scenario", "accuracy"))
    cmp_.add_argument("--runs", type=int, default=int(_env("runs", 10)))
    cmp_.add_argument("--mode", default=_env("mode", "sim"), help="sim (virtual clock) or loopback (TUN)")
    cmp_.add_argument("--pre-connect-ms", type=float, default=float(_env("pre_connect_ms", 12.0)))
    cmp_.add_argument("--timeout-ms", type=int, default=int(_env("timeout_ms", 3000)))
    cmp_.add_argument("--seed", type=int, default=_env("seed"))

    rpt = sub.add_parser("report", help="all-app and per-app views from an event log")
    common(rpt, store=True)
    rpt.add_argument("--app", default=_env("app"))
    rpt.add_argument("--cdf", dest="cdf_path", default=_env("cdf"), help="write CDF CSV here ('-' for stdout)")
    rpt.add_argument("--tag", dest="network_tag", default=_env("tag"))
    return p


def _parse_redirects(items) -> dict:
    out = {}
    for item in items:
        try:
            src, dst = item.split("=")
            sh, sp = src.rsplit(":", 1)
            dh, dp = dst.rsplit(":", 1)
            out[(sh, int(sp))] = (dh, int(dp))
        except ValueError as exc:
            raise UsageError(f"bad --redirect {item!r}; expected HOST:PORT=HOST:PORT") from exc
    return out


def config_from_args(ns: argparse.Namespace) -> CliConfig:
    d = {k: v for k, v in vars(ns).items() if k in CliConfig.__dataclass_fields__ and v is not None}
    if "redirect" in d:
        d["redirect"] = _parse_redirects(d["redirect"])
    for k in ("seed", "duration"):
        if k in d and isinstance(d[k], str):
            d[k] = float(d[k]) if k == "duration" else int(d[k])
    if ns.command == "report":
        d["network_tag"] = ns.network_tag
    cfg = CliConfig(**d)
    cfg.validate()
    return cfg


def _make_resolver(name: str):
    from .flows import MapResolver, NullResolver, platform_resolver

    if name == "none":
        return NullResolver()
    if name.startswith("map:"):
        return MapResolver.from_file(name[4:])
    return platform_resolver()


def _emit(out, fmt: str, text: str, obj, rows: list[list] | None = None) -> None:
    if fmt == "json":
        out.write(json.dumps(obj, indent=2, sort_keys=False) + "\n")
    elif fmt == "csv":
        w = csv.writer(out)
        for r in rows or []:
            w.writerow(r)
    else:
        out.write(text + ("\n" if text and not text.endswith("\n") else ""))


# -- commands ------------------------------------------------------------------------------


def cmd_run(cfg: CliConfig, out, err) -> int:
    from .clock import RealLoop
    from .netio import TunError, open_tunnel
    from .network import RealNetwork
    from .relay import Relay, RelayConfig
    from .stats import StatsStore, render_all_app

    resolver = _make_resolver(cfg.resolver)
    rcfg = RelayConfig(connect_timeout_ns=cfg.timeout_ms * NS_PER_MS, max_flows=cfg.max_flows,
                       strict_checksums=cfg.strict_checksums, network_tag=cfg.network_tag)
    try:
        tun = open_tunnel(cfg.tunnel_name, address=cfg.address)
    except TunError as exc:
        err.write(f"splicemon: cannot open tunnel {cfg.tunnel_name}: {exc}. "
                  "Creating a TUN device needs CAP_NET_ADMIN (run as root or grant the capability).\n")
        return EXIT_RUNTIME
    store = StatsStore()
    store.attach(cfg.store_path)
    loop = RealLoop()
    relay = Relay(loop, tun, RealNetwork(loop, cfg.redirect), rcfg, resolver=resolver, record=store.record)
    stop = threading.Event()
    previous = {}
    if threading.current_thread() is threading.main_thread():
        for sig in (signal.SIGINT, signal.SIGTERM):
            previous[sig] = signal.signal(sig, lambda *_: stop.set())
    loop.start("relay-loop")
    relay.attach()
    err.write(f"splicemon: relaying on {cfg.tunnel_name} ({cfg.address}); route app traffic into it. "
              "Interrupt to stop.\n")
    err.flush()
    deadline = None if cfg.duration is None else loop.now_ns() + int(cfg.duration * NS_PER_S)
    try:
        while not stop.is_set():
            wait = cfg.report_interval if cfg.report_interval > 0 else 0.5
            if deadline is not None:
                wait = min(wait, max(0.0, (deadline - loop.now_ns()) / NS_PER_S))
            stop.wait(wait)
            if deadline is not None and loop.now_ns() >= deadline:
                break
            if cfg.report_interval > 0 and not stop.is_set() and cfg.output_format == "text":
                out.write(render_all_app(store.all_app_view()) + "\n\n")
                out.flush()
    finally:
        loop.run_sync(relay.close, timeout=10)
        loop.stop()
        tun.close()
        store.close()
        for sig, handler in previous.items():
            signal.signal(sig, handler)
    view = store.all_app_view()
    _emit(out, cfg.output_format, render_all_app(view),
          {"apps": [s.display() for s in view], "counters": dict(relay.counters)},
          _app_rows(view))
    return EXIT_OK


def _app_rows(view) -> list[list]:
    rows = [["app", "conn_count", "success_count", "min_ms", "mean_ms", "max_ms", "failures", "dns_misconfig"]]
    for s in view:
        d = s.display()
        rows.append([d["app"], d["conn_count"], d["success_count"], d["min_ms"], d["mean_ms"], d["max_ms"],
                     d["failures"], d["dns_misconfig"]])
    return rows


def replay_report(path: str) -> dict:
    """Pair SYNs with SYN-ACKs in a capture; list unanswered SYNs."""
    from .netio import CaptureReader
    from .packet import IpProto, PacketError, TcpFlags, flow_key_of, parse_ipv4

    syn_at: dict = {}
    answered: dict = {}
    with CaptureReader(path) as reader:
        records = 0
        for rec in reader:
            records += 1
            try:
                pkt = parse_ipv4(rec.data)
                if pkt.protocol != IpProto.TCP or len(pkt.payload) < 14:
                    continue
                key = flow_key_of(pkt)
            except PacketError:
                continue
            flags = pkt.payload[13]
            if flags & TcpFlags.SYN and not flags & TcpFlags.ACK:
                syn_at.setdefault(key, rec.ts_ns)
            elif flags & TcpFlags.SYN and flags & TcpFlags.ACK:
                client = key.reversed()
                if client in syn_at and client not in answered:
                    answered[client] = rec.ts_ns
        counters = {"records": records, "truncated": reader.truncated, "skipped": reader.skipped}
    flows = []
    for key, t_syn in syn_at.items():
        t_ack = answered.get(key)
        flows.append({
            "flow": str(key), "syn_ns": t_syn, "synack_ns": t_ack,
            "rtt_ms": None if t_ack is None else (t_ack - t_syn) / NS_PER_MS,
            "status": "answered" if t_ack is not None else "unanswered",
        })
    return {"flows": flows, **counters}


def cmd_replay(cfg: CliConfig, out, err) -> int:
    report = replay_report(cfg.capture_path)
    lines = [f"{f['flow']:<48} {f['rtt_ms']:.3f} ms" if f["rtt_ms"] is not None
             else f"{f['flow']:<48} unanswered" for f in report["flows"]]
    lines.append(f"{len(report['flows'])} flows, {sum(f['status'] == 'answered' for f in report['flows'])} "
                 f"answered, {report['records']} records")
    rows = [["flow", "syn_ns", "synack_ns", "rtt_ms", "status"]]
    rows += [[f["flow"], f["syn_ns"], f["synack_ns"], f["rtt_ms"], f["status"]] for f in report["flows"]]
    _emit(out, cfg.output_format, "\n".join(lines), report, rows)
    return EXIT_OK


def cmd_simulate(cfg: CliConfig, out, err) -> int:
    from . import sim

    scenario = sim.load_scenario(cfg.scenario_path)
    if cfg.seed is not None:
        scenario.seed = cfg.seed
    bundle = sim.run_scenario(scenario)
    audit = bundle.audit()
    paths = bundle.dump(cfg.out_dir) if cfg.out_dir else {}
    summary = bundle.summary()
    summary.pop("emissions")
    summary["digest"] = bundle.digest()
    summary["audit"] = {"ok": audit.ok, "checked": audit.checked, "violations": audit.violations}
    summary["files"] = {k: str(v) for k, v in paths.items()}
    lines = [f"scenario {scenario.name} seed {scenario.seed}: {len(bundle.samples)} samples, "
             f"{len(bundle.failures)} failures, ended at {bundle.end_ns / NS_PER_MS:.3f} ms virtual"]
    for s in bundle.samples:
        lines.append(f"  {s.app.name:<12} {s.key.dst_addr}:{s.key.dst_port:<6} {s.outcome.value:<11} "
                     f"{s.rtt_ns / NS_PER_MS:.3f} ms")
    for f in bundle.failures:
        lines.append(f"  failure {f.cls.value} {f.app.name}: {f.evidence}")
    lines.append(f"audit {'passed' if audit.ok else 'FAILED'} ({audit.checked} external packets checked)")
    lines.append(f"digest {summary['digest']}")
    rows = [["app", "destination", "outcome", "rtt_ns"]]
    rows += [[s.app.name, f"{s.key.dst_addr}:{s.key.dst_port}", s.outcome.value, s.rtt_ns] for s in bundle.samples]
    _emit(out, cfg.output_format, "\n".join(lines), summary, rows)
    return EXIT_OK if audit.ok else EXIT_RUNTIME


def run_compare(cfg: CliConfig) -> dict:
    """Direct and baseline rows for the scenario's accepting endpoints."""
    from . import sim
    from .rtt import SocketProbe, Target, compare_accuracy

    scenario = sim.load_scenario(cfg.scenario_path)
    targets = sim.accuracy_targets(scenario)
    if not targets:
        raise sim.ScenarioInvalid("scenario has no accepting TCP endpoint to compare against")
    seed = scenario.seed if cfg.seed is None else cfg.seed
    pre = int(cfg.pre_connect_ms * NS_PER_MS)
    timeout = cfg.timeout_ms * NS_PER_MS
    if cfg.mode == "sim":
        direct = compare_accuracy(targets, sim.sim_measure(scenario, "direct", pre, seed), cfg.runs)
        base = compare_accuracy(targets, sim.sim_measure(scenario, "baseline", pre, seed + 1), cfg.runs)
    else:
        from .lab import DelayLineResponder, delay_line_measure, open_lab_tunnel

        tun, net = open_lab_tunnel()
        try:
            hosts, mapped = {}, []
            by_addr = {(e.addr, e.port): e for e in scenario.endpoints}
            for i, t in enumerate(targets):
                host = str(net.network_address + 2 + i)
                hosts[host] = by_addr[(t.addr, t.port)].oracle_rtt_ns
                mapped.append(Target(t.label, host, t.port))
            with DelayLineResponder(tun, hosts, seed=seed) as resp:
                probe = SocketProbe()
                direct = compare_accuracy(mapped, delay_line_measure(resp, probe, "direct", timeout), cfg.runs)
                base = compare_accuracy(mapped, delay_line_measure(resp, probe, "baseline", timeout, pre),
                                        cfg.runs)
        finally:
            tun.close()
    return {"mode": cfg.mode, "runs": cfg.runs, "direct": direct, "baseline": base}


def cmd_compare(cfg: CliConfig, out, err) -> int:
    from .rtt import COLUMNS, format_comparison

    res = run_compare(cfg)
    text = (f"direct meter ({res['mode']}, {res['runs']} runs)\n{format_comparison(res['direct'])}\n\n"
            f"coarse baseline ({cfg.pre_connect_ms:g} ms pre-connect work, ms timestamps)\n"
            f"{format_comparison(res['baseline'])}")
    obj = {"mode": res["mode"], "runs": res["runs"]}
    rows = [["meter", *COLUMNS]]
    for meter in ("direct", "baseline"):
        obj[meter] = [{"destination": r.destination, "reference_ms": r.reference_ms, "meter_ms": r.meter_ms,
                       "delta_ms": r.delta_ms, "runs": r.runs} for r in res[meter]]
        rows += [[meter, r.destination, f"{r.reference_ms:.3f}", f"{r.meter_ms:.3f}", f"{r.delta_ms:.3f}", r.runs]
                 for r in res[meter]]
    _emit(out, cfg.output_format, text, obj, rows)
    return EXIT_OK


def cmd_report(cfg: CliConfig, out, err) -> int:
    from .stats import StatsStore, render_all_app, render_app

    if not Path(cfg.store_path).exists():
        raise FileNotFoundError(f"no event log at {cfg.store_path}")
    store = StatsStore.load(cfg.store_path)
    if store.corrupt_records:
        err.write(f"splicemon: skipped {store.corrupt_records} corrupt record(s)\n")
    if cfg.cdf_path:
        buf = io.StringIO()
        store.export_cdf_csv(buf, cfg.app, cfg.network_tag)
        if cfg.cdf_path == "-":
            out.write(buf.getvalue())
        else:
            Path(cfg.cdf_path).write_text(buf.getvalue())
            err.write(f"splicemon: wrote CDF to {cfg.cdf_path}\n")
        return EXIT_OK
    if cfg.app:
        stats = store.app_view(cfg.app)
        obj = stats.display()
        obj["destinations"] = {
            k: {"count": d.count, "min_ns": d.min_ns, "max_ns": d.max_ns, "mean_ns": d.mean_ns,
                "failures": {c.value: n for c, n in d.failures.items()}}
            for k, d in sorted(stats.per_destination.items())
        }
        rows = [["destination", "count", "min_ns", "mean_ns", "max_ns"]]
        rows += [[k, v["count"], v["min_ns"], v["mean_ns"], v["max_ns"]] for k, v in obj["destinations"].items()]
        _emit(out, cfg.output_format, render_app(stats), obj, rows)
        return EXIT_OK
    if cfg.output_format == "csv":
        store.export_csv(out)
        return EXIT_OK
    view = store.all_app_view()
    _emit(out, cfg.output_format, render_all_app(view), {"apps": [s.display() for s in view]})
    return EXIT_OK


COMMANDS = {"run": cmd_run, "replay": cmd_replay, "simulate": cmd_simulate, "compare": cmd_compare,
            "report": cmd_report}


def main(argv: list[str] | None = None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(ns.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = config_from_args(ns)
    except (UsageError, ValueError) as exc:
        err.write(f"splicemon: {exc}\n")
        return EXIT_USAGE
    shown = {k: v for k, v in asdict(cfg).items() if v not in (None, {}, [])}
    if cfg.redirect:
        shown["redirect"] = {f"{h}:{p}": f"{th}:{tp}" for (h, p), (th, tp) in cfg.redirect.items()}
    err.write("splicemon: " + json.dumps(shown, sort_keys=True, default=str) + "\n")
    try:
        return COMMANDS[cfg.command](cfg, out, err)
    except UsageError as exc:
        err.write(f"splicemon: {exc}\n")
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # surfaced per module, never a traceback by default
        log.debug("command failed", exc_info=True)
        err.write(f"splicemon: {type(exc).__name__}: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
