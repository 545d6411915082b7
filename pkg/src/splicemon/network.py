"""External network backends used by the relay.

A backend opens outbound TCP connections and UDP endpoints on behalf of
tunnel flows. All callbacks are delivered on the owning loop's thread.

:class:`RealNetwork` uses system sockets with helper threads.
:class:`SimNetwork` is a scripted network on a virtual clock that logs every
packet it is asked to send so the relay can be audited.
"""

from __future__ import annotations

import enum
import errno
import logging
import queue
import random
import socket
import struct
import threading
from dataclasses import dataclass, field
from ipaddress import IPv4Address
from typing import Callable

from .clock import NS_PER_MS, NS_PER_S
from .diagnostics import TYPE_A, _read_name, build_response
from .packet import FlowKey, as_addr
from .records import Outcome
from .rtt import Attempt, bracket, outcome_for_errno

log = logging.getLogger(__name__)


@dataclass
class ConnHandlers:
    """Callbacks for one outbound connection; all run on the loop thread."""

    on_connected: Callable[[int, int], None]
    on_failed: Callable[[Outcome, int, int, str], None]
    on_data: Callable[[bytes], None]
    on_eof: Callable[[], None]
    on_error: Callable[[str], None]


class ExternalConn:
    """Handle for an outbound connection."""

    bytes_sent = 0
    bytes_received = 0

    def write(self, data: bytes) -> None:
        raise NotImplementedError

    def shutdown_write(self) -> None:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    def abort(self) -> None:
        raise NotImplementedError

    def pause_reading(self) -> None:
        raise NotImplementedError

    def resume_reading(self) -> None:
        raise NotImplementedError


class UdpEndpoint:
    def send(self, data: bytes) -> None:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


# -- real sockets ---------------------------------------------------------------------


_CLOSE = object()


class RealConn(ExternalConn):
    def __init__(self, net: "RealNetwork", key: FlowKey, addr: tuple[str, int], timeout_ns: int,
                 handlers: ConnHandlers):
        self.net = net
        self.key = key
        self.addr = addr
        self.timeout_ns = timeout_ns
        self.h = handlers
        self.sock: socket.socket | None = None
        self.bytes_sent = 0
        self.bytes_received = 0
        self._readable = threading.Event()
        self._readable.set()
        self._out: queue.Queue = queue.Queue()
        self._dead = threading.Event()
        self._lock = threading.Lock()
        threading.Thread(target=self._connect, name=f"connect {addr}", daemon=True).start()

    def _post(self, fn, *args) -> None:
        if not self._dead.is_set():
            self.net.loop.call_soon_threadsafe(self._guarded, fn, args)

    def _guarded(self, fn, args) -> None:
        if not self._dead.is_set():
            fn(*args)

    def _connect(self) -> None:
        try:
            sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.settimeout(self.timeout_ns / NS_PER_S)
            if self.net.source:
                sock.bind((self.net.source, 0))
        except OSError as exc:
            now = self.net.loop.now_ns()
            self._post(self.h.on_failed, Outcome.UNREACHABLE, now, now, f"local: {exc.strerror}")
            return
        addr = self.addr
        t_start, err, t_end = bracket(self.net.loop.now_ns, lambda: sock.connect_ex(addr))
        with self._lock:
            if self._dead.is_set():
                sock.close()
                return
            self.sock = sock
        if err:
            sock.close()
            self._post(self.h.on_failed, outcome_for_errno(err), t_start, t_end,
                       errno.errorcode.get(err, str(err)))
            return
        sock.settimeout(None)
        self._post(self.h.on_connected, t_start, t_end)
        threading.Thread(target=self._reader, name=f"read {addr}", daemon=True).start()
        threading.Thread(target=self._writer, name=f"write {addr}", daemon=True).start()

    def _reader(self) -> None:
        sock = self.sock
        while not self._dead.is_set():
            self._readable.wait()
            try:
                data = sock.recv(65536)
            except OSError as exc:
                self._post(self.h.on_error, f"recv: {exc}")
                return
            if not data:
                self._post(self.h.on_eof)
                return
            self.bytes_received += len(data)
            self._post(self.h.on_data, data)

    def _writer(self) -> None:
        sock = self.sock
        while True:
            item = self._out.get()
            if item is None or self._dead.is_set():
                return
            if item is _CLOSE:
                self._teardown(False)
                return
            try:
                if item == b"":
                    sock.shutdown(socket.SHUT_WR)
                    continue
                sock.sendall(item)
                self.bytes_sent += len(item)
            except OSError as exc:
                self._post(self.h.on_error, f"send: {exc}")
                return

    def write(self, data: bytes) -> None:
        if data:
            self._out.put(bytes(data))

    def shutdown_write(self) -> None:
        self._out.put(b"")

    def pause_reading(self) -> None:
        # Gates the next recv; one already in progress still delivers.
        self._readable.clear()

    def resume_reading(self) -> None:
        self._readable.set()

    def _teardown(self, rst: bool) -> None:
        with self._lock:
            if self._dead.is_set():
                return
            self._dead.set()
            sock = self.sock
        self._readable.set()
        self._out.put(None)
        if sock is None:
            return
        try:
            if rst:
                # SHUT_RD wakes the reader without sending a FIN ahead of the RST.
                sock.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
                sock.shutdown(socket.SHUT_RD)
            else:
                sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        sock.close()

    def close(self) -> None:
        # Queued writes drain first; the writer thread then tears down.
        with self._lock:
            started = self.sock is not None
        if started:
            self._out.put(_CLOSE)
        else:
            self._teardown(False)

    def abort(self) -> None:
        self._teardown(True)


class RealUdp(UdpEndpoint):
    def __init__(self, net: "RealNetwork", addr: tuple[str, int], on_datagram: Callable[[bytes], None]):
        self.net = net
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        if net.source:
            self.sock.bind((net.source, 0))
        self.sock.connect(addr)
        self.on_datagram = on_datagram
        self.closed = False
        threading.Thread(target=self._reader, name=f"udp {addr}", daemon=True).start()

    def _reader(self) -> None:
        while not self.closed:
            try:
                data = self.sock.recv(65536)
            except OSError:
                return
            self.net.loop.call_soon_threadsafe(self._deliver, data)

    def _deliver(self, data: bytes) -> None:
        if not self.closed:
            self.on_datagram(data)

    def send(self, data: bytes) -> None:
        self.sock.send(data)

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self.sock.close()


class RealNetwork:
    """System sockets.

    ``redirect`` maps a destination ``(addr, port)`` (or a bare address) to
    another one; tests use it to send tunnel-addressed flows to local
    servers without routing them back into the tunnel.
    """

    def __init__(self, loop, redirect: dict | None = None, source: str | None = None):
        self.loop = loop
        self.redirect = dict(redirect or {})
        self.source = source

    def resolve(self, addr: IPv4Address, port: int) -> tuple[str, int]:
        hit = self.redirect.get((str(addr), port))
        if hit is not None:
            return str(hit[0]), int(hit[1])
        hit = self.redirect.get(str(addr))
        if hit is not None:
            return str(hit), port
        return str(addr), port

    def connect(self, key: FlowKey, timeout_ns: int, handlers: ConnHandlers) -> ExternalConn:
        return RealConn(self, key, self.resolve(key.dst_addr, key.dst_port), timeout_ns, handlers)

    def open_udp(self, key: FlowKey, on_datagram: Callable[[bytes], None]) -> UdpEndpoint:
        return RealUdp(self, self.resolve(key.dst_addr, key.dst_port), on_datagram)


# -- simulated network -------------------------------------------------------------------


class Behavior(enum.Enum):
    ACCEPT = "ACCEPT"
    REFUSE = "REFUSE"
    BLACKHOLE = "BLACKHOLE"
    DROP = "DROP"
    UNREACHABLE = "UNREACHABLE"


# Linux SYN retransmission schedule (initial RTO 1 s, doubling).
SYN_RETRY_NS = (0, 1 * NS_PER_S, 3 * NS_PER_S, 7 * NS_PER_S, 15 * NS_PER_S, 31 * NS_PER_S)


@dataclass
class SimEndpoint:
    """A scripted remote host.

    ``one_way_ns`` is the network delay in each direction, so a successful
    handshake completes ``2 * one_way_ns`` after the connect starts. Modes
    after connect: ``echo`` returns every byte, ``sink`` swallows them,
    ``script`` runs ``script`` steps (``["send", n_or_text]``,
    ``["wait", ms]``, ``["close"]``). ``DROP`` loses each SYN with
    ``drop_probability`` under ``seed``; the client retransmits on the
    kernel's schedule.
    """

    addr: str
    port: int
    behavior: Behavior = Behavior.ACCEPT
    one_way_ns: int = 0
    mode: str = "echo"
    script: list = field(default_factory=list)
    drop_probability: float = 0.0
    seed: int = 0
    protocol: str = "tcp"
    dns_records: dict = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        self.behavior = Behavior(self.behavior)
        self.addr = str(as_addr(self.addr))
        self._rng = random.Random(self.seed)

    @property
    def oracle_rtt_ns(self) -> int:
        return 2 * self.one_way_ns

    def syn_delivery(self) -> int | None:
        """Offset of the first SYN that gets through, or None (DROP only)."""
        for offset in SYN_RETRY_NS:
            if self._rng.random() >= self.drop_probability:
                return offset
        return None


@dataclass(frozen=True)
class Emission:
    """One packet the simulated network was asked to put on the wire."""

    t_ns: int
    key: FlowKey
    kind: str  # SYN, DATA, FIN, RST, UDP
    nbytes: int = 0
    origin: str = "relay"
    payload: bytes = b""


class SimConn(ExternalConn):
    def __init__(self, net: "SimNetwork", key: FlowKey, ep: SimEndpoint | None, timeout_ns: int,
                 h: ConnHandlers, origin: str):
        self.net = net
        self.key = key
        self.ep = ep
        self.h = h
        self.origin = origin
        self.loop = net.loop
        self.state = "connecting"
        self.bytes_sent = 0
        self.bytes_received = 0
        self.paused = False
        self._held: list = []
        self._fin_from_client = False
        self._server_closed = False
        self._pending_echo = 0
        self._script_done = True
        self._timers = []
        self.t_start = self.loop.now_ns()
        self._start(timeout_ns)

    # client -> network
    def _emit(self, kind: str, data: bytes = b"") -> None:
        self.net.emissions.append(Emission(self.loop.now_ns(), self.key, kind, len(data), self.origin,
                                           data if self.net.keep_payloads else b""))

    def _later(self, delay: int, fn, *args) -> None:
        self._timers.append(self.loop.call_later(delay, fn, *args))

    def _start(self, timeout_ns: int) -> None:
        ep = self.ep
        self._emit("SYN")
        if ep is None or ep.behavior is Behavior.BLACKHOLE:
            self._later(timeout_ns, self._fail, Outcome.TIMEOUT, "no response")
            return
        if ep.behavior is Behavior.UNREACHABLE:
            self._later(ep.oracle_rtt_ns, self._fail, Outcome.UNREACHABLE, "EHOSTUNREACH")
            return
        offset = 0
        if ep.behavior is Behavior.DROP:
            offset = ep.syn_delivery()
            for retry in SYN_RETRY_NS[1:]:
                if retry < timeout_ns and (offset is None or retry <= offset):
                    self._later(retry, self._retransmit)
            if offset is None:
                self._later(timeout_ns, self._fail, Outcome.TIMEOUT, "all SYNs dropped")
                return
        done = offset + ep.oracle_rtt_ns
        if done >= timeout_ns:
            self._later(timeout_ns, self._fail, Outcome.TIMEOUT, "handshake slower than timeout")
        elif ep.behavior is Behavior.REFUSE:
            self._later(done, self._fail, Outcome.REFUSED, "ECONNREFUSED")
        else:
            self._later(done, self._connected)

    def _retransmit(self) -> None:
        if self.state == "connecting":
            self._emit("SYN")

    def _fail(self, outcome: Outcome, reason: str) -> None:
        if self.state != "connecting":
            return
        self.state = "failed"
        self.h.on_failed(outcome, self.t_start, self.loop.now_ns(), reason)

    def _connected(self) -> None:
        if self.state != "connecting":
            return
        self.state = "open"
        self.h.on_connected(self.t_start, self.loop.now_ns())
        if self.ep.mode == "script":
            self._script_done = False
            self._run_script(list(self.ep.script))

    # server side
    def _run_script(self, steps: list) -> None:
        while steps:
            step = steps.pop(0)
            op = step[0]
            if op == "send":
                arg = step[1]
                data = arg.encode() if isinstance(arg, str) else bytes(int(arg))
                self._server_send(data)
            elif op == "wait":
                self.loop.call_later(int(float(step[1]) * NS_PER_MS), self._run_script, steps)
                return
            elif op == "close":
                self._server_close()
            else:
                raise ValueError(f"unknown script step {op}")
        self._script_done = True
        if self._fin_from_client:
            self._server_close()

    def _server_send(self, data: bytes) -> None:
        if self._server_closed:
            return
        self._later(self.ep.one_way_ns, self._arrive, data)

    def _server_close(self) -> None:
        if not self._server_closed:
            self._server_closed = True
            self._later(self.ep.one_way_ns, self._arrive, None)

    def _server_receive(self, data: bytes | None) -> None:
        if self.state == "aborted":
            return
        if data is None:
            self._fin_from_client = True
            if self.ep.mode in ("echo", "sink") or self._script_done:
                self._server_close()
            return
        if self.ep.mode == "echo":
            self._server_send(data)

    def _arrive(self, data: bytes | None) -> None:
        if self.state not in ("open",):
            return
        if self.paused:
            self._held.append(data)
            return
        self._hand_over(data)

    def _hand_over(self, data: bytes | None) -> None:
        if data is None:
            self.h.on_eof()
        else:
            self.bytes_received += len(data)
            self.h.on_data(data)

    # ExternalConn API
    def write(self, data: bytes) -> None:
        if self.state != "open" or not data:
            return
        self._emit("DATA", data)
        self.bytes_sent += len(data)
        self._later(self.ep.one_way_ns, self._server_receive, bytes(data))

    def shutdown_write(self) -> None:
        if self.state == "open":
            self._emit("FIN")
            self._later(self.ep.one_way_ns, self._server_receive, None)

    def pause_reading(self) -> None:
        self.paused = True

    def resume_reading(self) -> None:
        self.paused = False
        while self._held and not self.paused and self.state == "open":
            self._hand_over(self._held.pop(0))

    def close(self) -> None:
        if self.state == "open" and not self._fin_from_client:
            self.shutdown_write()
        if self.state == "connecting":
            self._emit("RST")
        self.state = "closed"
        for t in self._timers:
            t.cancel()

    def abort(self) -> None:
        if self.state in ("open", "connecting"):
            self._emit("RST")
        self.state = "aborted"
        for t in self._timers:
            t.cancel()


class SimUdp(UdpEndpoint):
    def __init__(self, net: "SimNetwork", key: FlowKey, ep: SimEndpoint | None, on_datagram, origin: str):
        self.net, self.key, self.ep, self.on_datagram, self.origin = net, key, ep, on_datagram, origin
        self.closed = False

    def send(self, data: bytes) -> None:
        if self.closed:
            return
        self.net.emissions.append(Emission(self.net.loop.now_ns(), self.key, "UDP", len(data), self.origin,
                                           bytes(data) if self.net.keep_payloads else b""))
        ep = self.ep
        if ep is None or ep.behavior is not Behavior.ACCEPT:
            return
        reply = self._answer(bytes(data))
        if reply is not None:
            self.net.loop.call_later(ep.oracle_rtt_ns, self._deliver, reply)

    def _answer(self, data: bytes) -> bytes | None:
        ep = self.ep
        if ep.mode == "dns":
            try:
                qid = struct.unpack_from("!H", data)[0]
                name, _ = _read_name(data, 12)
                qtype = struct.unpack_from("!H", data, _)[0]
            except Exception:
                return None
            addrs = ep.dns_records.get(name.lower(), None)
            if qtype != TYPE_A:
                addrs = []
            if addrs is None:
                return build_response(name, [], rcode=3, qid=qid)
            return build_response(name, addrs, qid=qid)
        if ep.mode == "echo":
            return data
        return None

    def _deliver(self, data: bytes) -> None:
        if not self.closed:
            self.on_datagram(data)

    def close(self) -> None:
        self.closed = True


class SimNetwork:
    """Scripted endpoints on a :class:`~splicemon.clock.SimLoop`."""

    def __init__(self, loop, endpoints: list[SimEndpoint] = (), keep_payloads: bool = False):
        self.loop = loop
        self.tcp: dict[tuple[str, int], SimEndpoint] = {}
        self.udp: dict[tuple[str, int], SimEndpoint] = {}
        self.emissions: list[Emission] = []
        self.keep_payloads = keep_payloads
        for ep in endpoints:
            self.add(ep)

    def add(self, ep: SimEndpoint) -> SimEndpoint:
        table = self.udp if ep.protocol == "udp" else self.tcp
        table[(ep.addr, ep.port)] = ep
        return ep

    def endpoint(self, addr, port, protocol: str = "tcp") -> SimEndpoint | None:
        table = self.udp if protocol == "udp" else self.tcp
        return table.get((str(as_addr(addr)), int(port)))

    def connect(self, key: FlowKey, timeout_ns: int, handlers: ConnHandlers, origin: str = "relay") -> SimConn:
        return SimConn(self, key, self.endpoint(key.dst_addr, key.dst_port), timeout_ns, handlers, origin)

    def open_udp(self, key: FlowKey, on_datagram, origin: str = "relay") -> SimUdp:
        return SimUdp(self, key, self.endpoint(key.dst_addr, key.dst_port, "udp"), on_datagram, origin)


class SimProbe:
    """Direct connects over a :class:`SimNetwork`, bypassing any relay."""

    def __init__(self, net: SimNetwork, origin: str = "probe"):
        self.net = net
        self.loop = net.loop
        self.origin = origin
        self._port = 20000

    def now_ns(self) -> int:
        return self.loop.now_ns()

    def work(self, duration_ns: int) -> None:
        self.loop.advance(duration_ns)

    def attempt(self, dst: tuple[str, int], timeout_ns: int) -> Attempt:
        result: list[Attempt] = []
        self._port += 1
        key = FlowKey.make(6, "192.0.2.1", self._port, dst[0], dst[1])
        conn = self.net.connect(key, timeout_ns, ConnHandlers(
            on_connected=lambda a, b: result.append(Attempt(a, b, Outcome.SUCCESS)),
            on_failed=lambda o, a, b, r: result.append(Attempt(a, b, o, r)),
            on_data=lambda d: None, on_eof=lambda: None, on_error=lambda r: None,
        ), origin=self.origin)
        self.loop.run_until(lambda: bool(result))
        conn.abort()
        return result[0]
