"""Splice tunnel flows onto real outbound connections.

The relay owns one :class:`SpliceEntry` per app TCP flow. Tunnel segments
go through the user-space TCP state machine; its actions are carried out
here. The outbound connect is the measurement: its bracketed duration
becomes the flow's :class:`~splicemon.records.RttSample`.

All relay state lives on one loop thread; helper threads only post
callbacks to it.
"""

from __future__ import annotations

import logging
import threading
from collections import Counter
from dataclasses import dataclass, field
from ipaddress import IPv4Address
from typing import Callable

from .clock import NS_PER_MS, NS_PER_S
from .diagnostics import DEFAULT_BOGUS, classify_failure, flag_misconfig, inspect_dns
from .flows import AttributionResolver, FlowRegistry
from .netio import ChannelClosed, PacketChannel
from .network import ConnHandlers, ExternalConn, UdpEndpoint
from .packet import (
    FlowKey,
    IpProto,
    Ipv4Packet,
    PacketError,
    TcpFlags,
    TcpSegment,
    UdpDatagram,
    flow_key_of,
    parse_ipv4,
    parse_tcp,
    parse_udp,
    tcp_packet,
    udp_packet,
)
from .records import UNKNOWN, AppId, FailureClass, FailureRecord, Outcome, RttSample
from .utcp import (
    ActionKind,
    ExtEvent,
    Phase,
    TcpAction,
    TcpFlowState,
    classify_segment,
    initial_sequence,
    new_flow,
    on_external_event,
    on_tunnel_segment,
    send_capacity,
    stray_reset,
)

log = logging.getLogger(__name__)


class FlowTableFull(RuntimeError):
    pass


@dataclass
class RelayConfig:
    connect_timeout_ns: int = 3 * NS_PER_S
    udp_idle_expiry_ns: int = 60 * NS_PER_S
    max_flows: int = 4096
    per_flow_queue: int = 256 * 1024
    strict_checksums: bool = False
    linger_ns: int = 2 * NS_PER_S
    connect_slack_ns: int = 100 * NS_PER_MS
    mss: int = 1460
    window: int = 65535
    network_tag: str = "unlabeled"
    bogus_dns: frozenset = DEFAULT_BOGUS
    iss_seed: int | None = None
    trace: bool = False

    def __post_init__(self):
        if self.connect_timeout_ns <= 0:
            raise ValueError("connect_timeout must be positive")
        if self.max_flows <= 0:
            raise ValueError("max_flows must be positive")
        if self.per_flow_queue <= 0:
            raise ValueError("per_flow_queue must be positive")
        self.bogus_dns = frozenset(IPv4Address(a) for a in self.bogus_dns)


@dataclass
class SpliceEntry:
    key: FlowKey
    tcp_state: TcpFlowState
    opened_at: int
    app: AppId = UNKNOWN
    external: ExternalConn | None = None
    bytes_in: int = 0  # server -> app, delivered into the tunnel
    bytes_out: int = 0  # app -> server
    pending: bytearray = field(default_factory=bytearray)
    ext_eof: bool = False
    connected: bool = False
    resolved: bool = False  # the connect attempt has an outcome
    paused: bool = False
    guard: object = None
    removed: bool = False


@dataclass
class UdpEntry:
    key: FlowKey
    endpoint: UdpEndpoint
    app: AppId
    last_active: int
    datagrams_out: int = 0
    datagrams_in: int = 0
    timer: object = None


@dataclass(frozen=True)
class TraceEvent:
    t_ns: int
    key: FlowKey
    symbol: str
    phase: str
    actions: tuple[str, ...]

    def as_dict(self) -> dict:
        return {"t_ns": self.t_ns, "key": str(self.key), "symbol": self.symbol, "phase": self.phase,
                "actions": list(self.actions)}


class Relay:
    """Packet relay between a tunnel channel and an external network backend."""

    def __init__(self, loop, tunnel: PacketChannel, network, config: RelayConfig | None = None,
                 resolver: AttributionResolver | None = None,
                 record: Callable[[RttSample | FailureRecord], object] | None = None,
                 wall: Callable[[], float] | None = None):
        self.loop = loop
        self.tunnel = tunnel
        self.network = network
        self.cfg = config or RelayConfig()
        self.registry = FlowRegistry(resolver)
        self.tcp: dict[FlowKey, SpliceEntry] = {}
        self.udp: dict[FlowKey, UdpEntry] = {}
        self.counters: Counter = Counter()
        self.trace: list[TraceEvent] = []
        self.samples: list[RttSample] = []
        self.failures: list[FailureRecord] = []
        self._record = record
        self._wall = wall or getattr(getattr(loop, "clock", None), "wall", None) or (lambda: 0.0)
        self._flow_seq = 0
        self._reader: threading.Thread | None = None
        self._closing = False

    # -- wiring ----------------------------------------------------------------------

    def attach(self) -> None:
        """Start receiving tunnel packets (receiver callback or reader thread)."""
        if hasattr(self.tunnel, "set_receiver"):
            self.tunnel.set_receiver(self.handle_packet)
            return
        self._reader = threading.Thread(target=self._read_tunnel, name="tunnel-reader", daemon=True)
        self._reader.start()

    def _read_tunnel(self) -> None:
        while not self._closing:
            try:
                raw = self.tunnel.read_packet(timeout=0.2)
            except (ChannelClosed, OSError):
                return
            if raw is not None:
                self.loop.call_soon_threadsafe(self.handle_packet, raw)

    def close(self) -> None:
        """Abort every flow and release external resources."""
        self._closing = True
        for key in list(self.tcp):
            self.shutdown_flow(key, "relay shutdown")
        for key in list(self.udp):
            self._expire_udp(key, force=True)

    @property
    def active_flows(self) -> int:
        return len(self.tcp) + len(self.udp)

    # -- output ----------------------------------------------------------------------

    def _emit(self, record: RttSample | FailureRecord) -> None:
        if isinstance(record, RttSample):
            self.samples.append(record)
        else:
            self.failures.append(record)
        if self._record is not None:
            self._record(record)

    def _write_tunnel(self, key: FlowKey, seg: TcpSegment) -> None:
        try:
            self.tunnel.write_packet(tcp_packet(key.dst_addr, key.src_addr, seg))
            self.counters["tunnel_tx"] += 1
        except (ChannelClosed, OSError) as exc:
            self.counters["tunnel_write_errors"] += 1
            log.debug("tunnel write failed: %s", exc)

    # -- tunnel input ----------------------------------------------------------------

    def handle_packet(self, raw: bytes) -> None:
        self.counters["tunnel_rx"] += 1
        if not raw or raw[0] >> 4 != 4:
            self.counters["non_ipv4"] += 1
            return
        try:
            pkt = parse_ipv4(raw)
        except PacketError as exc:
            self.counters["malformed"] += 1
            log.debug("malformed packet: %s", exc)
            return
        if not pkt.checksum_ok:
            self.counters["bad_checksum"] += 1
            return
        self.handle_tunnel_packet(pkt)

    def handle_tunnel_packet(self, pkt: Ipv4Packet) -> None:
        try:
            if pkt.protocol == IpProto.TCP:
                seg = parse_tcp(pkt)
                if not self._checksum_acceptable(seg):
                    return
                self._tcp_input(flow_key_of(pkt), seg)
            elif pkt.protocol == IpProto.UDP:
                dgram = parse_udp(pkt)
                if not self._checksum_acceptable(dgram):
                    return
                self.relay_udp(dgram, flow_key_of(pkt))
            else:
                self.counters["unsupported_protocol"] += 1
        except PacketError as exc:
            self.counters["malformed"] += 1
            log.debug("malformed transport header: %s", exc)

    def _checksum_acceptable(self, seg) -> bool:
        if seg.checksum_ok:
            return True
        if getattr(seg, "checksum_offloaded", False) and not self.cfg.strict_checksums:
            self.counters["offloaded_checksum"] += 1
            return True
        self.counters["bad_checksum"] += 1
        return False

    def _tcp_input(self, key: FlowKey, seg: TcpSegment) -> None:
        entry = self.tcp.get(key)
        is_syn = seg.has(TcpFlags.SYN) and not seg.has(TcpFlags.ACK) and not seg.has(TcpFlags.RST)
        if entry is not None and is_syn and entry.tcp_state.phase in (Phase.TIME_WAIT_BRIEF, Phase.ABORTED):
            if entry.tcp_state.phase is Phase.ABORTED and seg.seq == entry.tcp_state.irs:
                # Retransmission of the SYN we just failed; it crossed our RST.
                self.counters["stale_syn"] += 1
                self._write_tunnel(key, TcpSegment(key.dst_port, key.src_port, seq=0,
                                                   ack=(seg.seq + 1) & 0xFFFFFFFF,
                                                   flags=TcpFlags.RST | TcpFlags.ACK, window=0))
                return
            self._remove(entry)
            entry = None
        if entry is None:
            if not is_syn:
                rst = stray_reset(key, seg)
                self.counters["stray_segments"] += 1
                if rst is not None:
                    self._write_tunnel(key, rst.segment)
                return
            if self.active_flows >= self.cfg.max_flows:
                self.counters["flow_table_full"] += 1
                log.warning("flow table full; resetting %s", key)
                rst = TcpSegment(key.dst_port, key.src_port, seq=0, ack=(seg.seq + 1) & 0xFFFFFFFF,
                                 flags=TcpFlags.RST | TcpFlags.ACK, window=0)
                self._write_tunnel(key, rst)
                return
            entry = self._new_entry(key)
        sym = "T:" + classify_segment(entry.tcp_state, seg)
        entry.tcp_state, actions = on_tunnel_segment(entry.tcp_state, seg)
        self._apply(entry, sym, actions)
        if not entry.removed:
            self._flush(entry)

    def _new_entry(self, key: FlowKey) -> SpliceEntry:
        seed = None if self.cfg.iss_seed is None else self.cfg.iss_seed * 1_000_003 + self._flow_seq
        self._flow_seq += 1
        state = new_flow(key, initial_sequence(seed), self.cfg.mss, self.cfg.window)
        entry = SpliceEntry(key, state, self.loop.now_ns())
        entry.app = self.registry.register_flow(key, now_ns=entry.opened_at, entry=entry)
        self.tcp[key] = entry
        self.counters["tcp_flows"] += 1
        return entry

    # -- state machine actions ----------------------------------------------------------

    def _apply(self, entry: SpliceEntry, symbol: str, actions: list[TcpAction]) -> None:
        if self.cfg.trace:
            self.trace.append(TraceEvent(self.loop.now_ns(), entry.key, symbol, entry.tcp_state.phase.value,
                                         tuple(a.kind.value for a in actions)))
        for a in actions:
            kind = a.kind
            if kind is ActionKind.EMIT_SEGMENT or kind is ActionKind.RESET:
                entry.bytes_in += len(a.segment.payload)
                self._write_tunnel(entry.key, a.segment)
            elif kind is ActionKind.DELIVER_PAYLOAD:
                entry.bytes_out += len(a.data)
                if entry.external is not None:
                    entry.external.write(a.data)
            elif kind is ActionKind.OPEN_EXTERNAL:
                self.open_external(entry)
            elif kind is ActionKind.CLOSE_EXTERNAL:
                self._close_external(entry, a.mode)
            elif kind is ActionKind.DROP:
                self.counters["dropped_segments"] += 1
        phase = entry.tcp_state.phase
        if phase in (Phase.TIME_WAIT_BRIEF, Phase.ABORTED) and not entry.removed and entry.guard != "linger":
            if phase is Phase.TIME_WAIT_BRIEF and entry.external is not None:
                entry.external.close()
            if entry.guard is not None and entry.guard != "linger":
                entry.guard.cancel()
            entry.guard = "linger"
            self.loop.call_later(self.cfg.linger_ns, self._linger_done, entry)

    def _linger_done(self, entry: SpliceEntry) -> None:
        if not entry.removed and self.tcp.get(entry.key) is entry:
            self._remove(entry)

    def _remove(self, entry: SpliceEntry) -> None:
        entry.removed = True
        if self.tcp.get(entry.key) is entry:
            del self.tcp[entry.key]
        self.registry.remove(entry.key)
        if entry.external is not None:
            entry.external.close() if entry.tcp_state.phase is Phase.TIME_WAIT_BRIEF else entry.external.abort()
        if entry.guard is not None and entry.guard != "linger":
            entry.guard.cancel()

    def _close_external(self, entry: SpliceEntry, mode: str) -> None:
        ext = entry.external
        if mode == "abort":
            if not entry.resolved:
                self._resolve_failure(entry, Outcome.CANCELED, entry.opened_at, self.loop.now_ns(), "app reset")
            if ext is not None:
                ext.abort()
        elif ext is not None and entry.connected:
            ext.shutdown_write()

    # -- external side --------------------------------------------------------------------

    def open_external(self, entry: SpliceEntry) -> None:
        key = entry.key
        handlers = ConnHandlers(
            on_connected=lambda t0, t1: self._on_connected(entry, t0, t1),
            on_failed=lambda outcome, t0, t1, reason: self._on_failed(entry, outcome, t0, t1, reason),
            on_data=lambda data: self._on_data(entry, data),
            on_eof=lambda: self._on_eof(entry),
            on_error=lambda reason: self._on_error(entry, reason),
        )
        self.counters["connects"] += 1
        try:
            entry.external = self.network.connect(key, self.cfg.connect_timeout_ns, handlers)
        except OSError as exc:
            now = self.loop.now_ns()
            self._on_failed(entry, Outcome.UNREACHABLE, now, now, f"local: {exc}")
            return
        entry.guard = self.loop.call_later(self.cfg.connect_timeout_ns + self.cfg.connect_slack_ns,
                                           self._connect_guard, entry)

    def _connect_guard(self, entry: SpliceEntry) -> None:
        if entry.removed or entry.resolved:
            return
        self.counters["connect_guard_fired"] += 1
        if entry.external is not None:
            entry.external.abort()
        self._on_failed(entry, Outcome.TIMEOUT, entry.opened_at, self.loop.now_ns(), "connect guard")

    def _sample(self, entry, outcome, t0, t1, reason="") -> RttSample:
        return RttSample(entry.key, entry.app, t0, t1, outcome, self.cfg.network_tag, self._wall(), reason)

    def _on_connected(self, entry: SpliceEntry, t0: int, t1: int) -> None:
        if entry.removed or entry.resolved:
            return
        entry.resolved = True
        entry.connected = True
        if entry.guard is not None and entry.guard != "linger":
            entry.guard.cancel()
            entry.guard = None
        self._emit(self._sample(entry, Outcome.SUCCESS, t0, t1))
        entry.tcp_state, actions = on_external_event(entry.tcp_state, ExtEvent.connected())
        self._apply(entry, "X:CONNECTED", actions)

    def _resolve_failure(self, entry, outcome: Outcome, t0: int, t1: int, reason: str) -> None:
        entry.resolved = True
        self._emit(self._sample(entry, outcome, t0, t1, reason))
        cls = classify_failure(outcome, t1 - t0, self.cfg.connect_timeout_ns)
        self._emit(FailureRecord(entry.key, entry.app, cls, f"{reason} after {(t1 - t0) / NS_PER_MS:.3f} ms",
                                 self._wall(), self.cfg.network_tag))
        self.counters[f"failed_{cls.value.lower()}"] += 1

    def _on_failed(self, entry: SpliceEntry, outcome: Outcome, t0: int, t1: int, reason: str) -> None:
        if entry.removed or entry.resolved:
            return
        self._resolve_failure(entry, outcome, t0, t1, reason)
        entry.tcp_state, actions = on_external_event(entry.tcp_state, ExtEvent.failed(reason))
        self._apply(entry, "X:CONNECT_FAILED", actions)

    def _on_data(self, entry: SpliceEntry, data: bytes) -> None:
        if entry.removed:
            return
        entry.pending += data
        if len(entry.pending) >= self.cfg.per_flow_queue and not entry.paused and entry.external is not None:
            entry.paused = True
            entry.external.pause_reading()
            self.counters["read_pauses"] += 1
        self._flush(entry)

    def _on_eof(self, entry: SpliceEntry) -> None:
        if entry.removed:
            return
        entry.ext_eof = True
        self._flush(entry)

    def _on_error(self, entry: SpliceEntry, reason: str) -> None:
        if entry.removed:
            return
        self.counters["external_errors"] += 1
        entry.tcp_state, actions = on_external_event(entry.tcp_state, ExtEvent.failed(reason))
        self._apply(entry, "X:CONNECT_FAILED", actions)

    def _flush(self, entry: SpliceEntry) -> None:
        """Move held server data into the tunnel as far as the app's window allows."""
        if entry.tcp_state.phase not in (Phase.ESTABLISHED, Phase.FIN_WAIT_LOCAL):
            return
        while entry.pending:
            room = send_capacity(entry.tcp_state)
            if room <= 0:
                break
            chunk = bytes(entry.pending[:room])
            del entry.pending[:room]
            entry.tcp_state, actions = on_external_event(entry.tcp_state, ExtEvent.payload(chunk))
            self._apply(entry, "X:DATA", actions)
        if entry.paused and len(entry.pending) < self.cfg.per_flow_queue // 2 and entry.external is not None:
            entry.paused = False
            entry.external.resume_reading()
        if entry.ext_eof and not entry.pending and entry.tcp_state.phase in (Phase.ESTABLISHED, Phase.FIN_WAIT_LOCAL):
            entry.tcp_state, actions = on_external_event(entry.tcp_state, ExtEvent.peer_closed())
            self._apply(entry, "X:PEER_CLOSED", actions)

    # -- teardown -------------------------------------------------------------------------

    def shutdown_flow(self, key: FlowKey, reason: str = "shutdown") -> bool:
        """Tear a flow down now. Returns False if it was already gone."""
        entry = self.tcp.get(key) or self.tcp.get(key.reversed())
        if entry is None or entry.removed:
            return False
        if not entry.resolved:
            now = self.loop.now_ns()
            elapsed = now - entry.opened_at
            outcome = Outcome.TIMEOUT if elapsed >= self.cfg.connect_timeout_ns else Outcome.CANCELED
            self._resolve_failure(entry, outcome, entry.opened_at, now, reason)
        if entry.tcp_state.phase not in (Phase.CLOSED, Phase.ABORTED, Phase.TIME_WAIT_BRIEF):
            entry.tcp_state, actions = on_external_event(entry.tcp_state, ExtEvent.failed(reason))
            self._apply(entry, "X:CONNECT_FAILED", actions)
        self._remove(entry)
        return True

    # -- UDP ---------------------------------------------------------------------------------

    def relay_udp(self, dgram: UdpDatagram, key: FlowKey) -> None:
        entry = self.udp.get(key)
        now = self.loop.now_ns()
        if entry is not None and now - entry.last_active >= self.cfg.udp_idle_expiry_ns:
            self._expire_udp(key, force=True)
            entry = None
        if entry is None:
            if self.active_flows >= self.cfg.max_flows:
                self.counters["flow_table_full"] += 1
                self.counters["udp_dropped"] += 1
                return
            app = self.registry.register_flow(key, now_ns=now)
            holder: list[UdpEntry] = []
            try:
                endpoint = self.network.open_udp(key, lambda data: self._udp_reply(holder[0], data))
            except OSError as exc:
                self.registry.remove(key)
                self.counters["udp_send_errors"] += 1
                log.debug("udp endpoint for %s failed: %s", key, exc)
                return
            entry = UdpEntry(key, endpoint, app, now)
            holder.append(entry)
            self.udp[key] = entry
            self.counters["udp_flows"] += 1
            self._arm_udp_timer(entry)
        entry.last_active = now
        self.registry.set_deadline(key, now + self.cfg.udp_idle_expiry_ns)
        try:
            entry.endpoint.send(dgram.payload)
            entry.datagrams_out += 1
        except OSError as exc:
            self.counters["udp_send_errors"] += 1
            log.debug("udp send failed: %s", exc)

    def _arm_udp_timer(self, entry: UdpEntry) -> None:
        entry.timer = self.loop.call_at(entry.last_active + self.cfg.udp_idle_expiry_ns, self._udp_timer, entry)

    def _udp_timer(self, entry: UdpEntry) -> None:
        if self.udp.get(entry.key) is not entry:
            return
        if self.loop.now_ns() - entry.last_active >= self.cfg.udp_idle_expiry_ns:
            self._expire_udp(entry.key, force=True)
        else:
            self._arm_udp_timer(entry)

    def _expire_udp(self, key: FlowKey, force: bool = False) -> None:
        entry = self.udp.pop(key, None)
        if entry is None:
            return
        entry.endpoint.close()
        if entry.timer is not None:
            entry.timer.cancel()
        self.registry.remove(key)
        self.counters["udp_expired"] += 1

    def _udp_reply(self, entry: UdpEntry, data: bytes) -> None:
        if self.udp.get(entry.key) is not entry:
            return
        key = entry.key
        entry.last_active = self.loop.now_ns()
        entry.datagrams_in += 1
        if key.dst_port == 53:
            summary = inspect_dns(bytes(data))
            if summary.malformed:
                self.counters["dns_malformed"] += 1
            else:
                rec = flag_misconfig(summary, self.cfg.bogus_dns, key, entry.app, self._wall(), self.cfg.network_tag)
                if rec is not None:
                    self.counters["dns_misconfig"] += 1
                    self._emit(rec)
        reply = UdpDatagram(key.dst_port, key.src_port, bytes(data))
        try:
            self.tunnel.write_packet(udp_packet(key.dst_addr, key.src_addr, reply))
            self.counters["tunnel_tx"] += 1
        except (ChannelClosed, OSError, ValueError) as exc:
            self.counters["tunnel_write_errors"] += 1
            log.debug("udp reply dropped: %s", exc)

    # -- audit helpers ------------------------------------------------------------------------

    def conn_failures(self) -> list[FailureRecord]:
        return [f for f in self.failures if f.cls is not FailureClass.DNS_MISCONFIG]
