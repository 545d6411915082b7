"""Real-clock rigs on a TUN device and loopback.

:class:`DelayLineResponder` owns a TUN subnet and answers the kernel's SYNs
with SYN-ACKs after a scripted delay, recording when each SYN was read and
each SYN-ACK written. Those two timestamps play the role a packet capture
plays on a phone: the reference the meters are compared against.

:class:`LoopbackRelay` runs the real relay on a TUN device with its
external side redirected to local servers, so kernel sockets in the test
process act as the monitored apps.
"""

from __future__ import annotations

import heapq
import ipaddress
import itertools
import os
import random
import select
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field

from .clock import NS_PER_MS, NS_PER_S, MonotonicClock, RealLoop
from .netio import TunChannel
from .network import RealNetwork
from .packet import (
    FlowKey,
    IpProto,
    PacketError,
    TcpFlags,
    TcpSegment,
    flow_key_of,
    mss_option,
    parse_ipv4,
    parse_tcp,
    tcp_packet,
)
from .relay import Relay, RelayConfig

_counter = itertools.count()


def tun_available() -> bool:
    """True if this process may create TUN devices."""
    try:
        fd = os.open("/dev/net/tun", os.O_RDWR)
    except OSError:
        return False
    os.close(fd)
    return True


def _used_networks() -> list[ipaddress.IPv4Network]:
    try:
        import psutil
    except ImportError:  # pragma: no cover
        return []
    out = []
    for addrs in psutil.net_if_addrs().values():
        for a in addrs:
            if a.family == socket.AF_INET and a.netmask:
                out.append(ipaddress.IPv4Interface(f"{a.address}/{a.netmask}").network)
    return out


def open_lab_tunnel(prefix: str = "spl") -> tuple[TunChannel, ipaddress.IPv4Network]:
    """Open a TUN device on a free 10.M.0.0/24 subnet; the host side is .1."""
    net = free_lab_network()
    name = f"{prefix}{os.getpid() % 10000}x{next(_counter)}"[:15]
    tun = TunChannel.open(name, address=f"{net.network_address + 1}/24")
    return tun, net


def free_lab_network() -> ipaddress.IPv4Network:
    """A 10.M.0.0/24 subnet that no local interface overlaps."""
    used = _used_networks()
    start = 64 + (os.getpid() + next(_counter) * 7) % 150
    for i in range(150):
        m = 64 + (start - 64 + i) % 150
        net = ipaddress.IPv4Network(f"10.{m}.0.0/24")
        if not any(net.overlaps(u) for u in used):
            return net
    raise RuntimeError("no free 10.x.0.0/24 subnet for a lab tunnel")


def precise_sleep_until(clock: MonotonicClock, deadline_ns: int) -> None:
    """Sleep coarsely, then spin the last millisecond."""
    while True:
        left = deadline_ns - clock.now_ns()
        if left <= 0:
            return
        if left > 2 * NS_PER_MS:
            time.sleep((left - NS_PER_MS) / NS_PER_S)


# -- delay-line responder -------------------------------------------------------------


@dataclass
class Handshake:
    key: FlowKey
    syn_read_ns: int
    synack_written_ns: int | None = None

    @property
    def reference_ns(self) -> int | None:
        if self.synack_written_ns is None:
            return None
        return self.synack_written_ns - self.syn_read_ns


@dataclass
class DelayLineResponder:
    """Answers SYNs on a TUN subnet after per-host delays.

    ``hosts`` maps a host address to a delay in ns, ``"refuse"`` or
    ``"blackhole"``. Addresses not listed are blackholed. After the
    handshake, any FIN or data from the kernel is answered with RST.
    """

    tun: TunChannel
    hosts: dict[str, int | str]
    clock: MonotonicClock = field(default_factory=MonotonicClock)
    seed: int = 0
    handshakes: list[Handshake] = field(default_factory=list)
    ignored: int = 0

    def __post_init__(self):
        self._rng = random.Random(self.seed)
        self._due: list = []
        self._seq = itertools.count()
        self._stop = threading.Event()
        self._lock = threading.Lock()
        self._thread: threading.Thread | None = None
        self._iss: dict[FlowKey, int] = {}

    def start(self) -> "DelayLineResponder":
        self._thread = threading.Thread(target=self._run, name="delay-line", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread:
            self._thread.join(2)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def take(self, addr: str) -> Handshake | None:
        """Pop the most recent handshake toward ``addr``."""
        with self._lock:
            for i in range(len(self.handshakes) - 1, -1, -1):
                if str(self.handshakes[i].key.dst_addr) == addr:
                    return self.handshakes.pop(i)
        return None

    def _run(self) -> None:
        fd = self.tun.fileno()
        while not self._stop.is_set():
            now = self.clock.now_ns()
            if self._due and self._due[0][0] - now <= 2 * NS_PER_MS:
                due, _, fn = heapq.heappop(self._due)
                precise_sleep_until(self.clock, due)
                fn()
                continue
            wait = 0.05
            if self._due:
                wait = min(wait, (self._due[0][0] - now - 2 * NS_PER_MS) / NS_PER_S)
            r, _, _ = select.select([fd], [], [], max(0.0, wait))
            if not r:
                continue
            try:
                raw = os.read(fd, 65535)
            except OSError:
                return
            self._packet(self.clock.now_ns(), raw)

    def _packet(self, t: int, raw: bytes) -> None:
        if not raw or raw[0] >> 4 != 4:
            return
        try:
            pkt = parse_ipv4(raw)
            if pkt.protocol != IpProto.TCP:
                return
            seg = parse_tcp(pkt)
        except PacketError:
            return
        key = flow_key_of(pkt)
        host = str(key.dst_addr)
        what = self.hosts.get(host, "blackhole")
        if seg.has(TcpFlags.SYN) and not seg.has(TcpFlags.ACK):
            if what == "blackhole":
                self.ignored += 1
                return
            if what == "refuse":
                self._write(key, TcpSegment(key.dst_port, key.src_port, 0, (seg.seq + 1) & 0xFFFFFFFF,
                                            TcpFlags.RST | TcpFlags.ACK, 0))
                return
            if key in self._iss:
                return  # kernel retransmit; the first SYN is the reference
            hs = Handshake(key, t)
            with self._lock:
                self.handshakes.append(hs)
            iss = self._rng.getrandbits(32)
            self._iss[key] = iss
            synack = TcpSegment(key.dst_port, key.src_port, iss, (seg.seq + 1) & 0xFFFFFFFF,
                                TcpFlags.SYN | TcpFlags.ACK, 65535, options=mss_option(1460))
            heapq.heappush(self._due, (t + int(what), next(self._seq), lambda: self._synack(hs, synack)))
        elif seg.payload or seg.has(TcpFlags.FIN):
            iss = self._iss.pop(key, None)
            if iss is not None:
                self._write(key, TcpSegment(key.dst_port, key.src_port, (iss + 1) & 0xFFFFFFFF, 0,
                                            TcpFlags.RST, 0))

    def _synack(self, hs: Handshake, seg: TcpSegment) -> None:
        # Stamp first: the write wakes the connecting thread before it returns.
        hs.synack_written_ns = self.clock.now_ns()
        self._write(hs.key, seg)

    def _write(self, key: FlowKey, seg: TcpSegment) -> None:
        try:
            self.tun.write_packet(tcp_packet(key.dst_addr, key.src_addr, seg))
        except OSError:
            pass


def delay_line_measure(responder: DelayLineResponder, probe, meter: str = "direct",
                       timeout_ns: int = 3 * NS_PER_S, pre_connect_ns: int = 12 * NS_PER_MS):
    """Measure closure for :func:`~splicemon.rtt.compare_accuracy` on a delay line.

    Returns ``(reference_ns, meter_ns)`` where the reference is the
    responder's SYN-read to SYN-ACK-write interval.
    """
    from .rtt import baseline_coarse_connect, time_connect

    def measure(target):
        dst = (target.addr, target.port)
        if meter == "direct":
            sample = time_connect(dst, timeout_ns, probe)
        else:
            sample = baseline_coarse_connect(dst, timeout_ns, probe, pre_connect_ns)
        hs = responder.take(target.addr)
        if hs is None or hs.reference_ns is None:
            raise RuntimeError(f"no reference handshake for {target.addr}")
        return hs.reference_ns, sample.rtt_ns

    return measure


# -- local servers --------------------------------------------------------------------------


class _EchoHandler(socketserver.BaseRequestHandler):
    def handle(self):
        s = self.request
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            while data := s.recv(65536):
                s.sendall(data)
            s.shutdown(socket.SHUT_WR)
        except (ConnectionResetError, BrokenPipeError):
            pass  # the peer aborted; nothing left to echo


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class EchoServer:
    """Threaded TCP echo server on 127.0.0.1; half-closes after the client does."""

    def __init__(self, host: str = "127.0.0.1"):
        self.server = _Server((host, 0), _EchoHandler)
        self.addr = self.server.server_address
        self._thread = threading.Thread(target=self.server.serve_forever, kwargs={"poll_interval": 0.05},
                                        daemon=True)

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


class SaturatedListener:
    """A loopback listener whose accept queue is full, so new SYNs are dropped."""

    def __init__(self):
        self.sock = socket.socket()
        self.sock.bind(("127.0.0.1", 0))
        self.sock.listen(0)
        self.addr = self.sock.getsockname()
        self.fillers: list[socket.socket] = []
        for _ in range(4):
            c = socket.socket()
            c.setblocking(False)
            c.connect_ex(self.addr)
            self.fillers.append(c)
        time.sleep(0.05)

    def is_saturated(self, probe_timeout: float = 0.3) -> bool:
        c = socket.socket()
        c.settimeout(probe_timeout)
        try:
            return c.connect_ex(self.addr) != 0
        finally:
            c.close()

    def close(self) -> None:
        for c in self.fillers:
            c.close()
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# -- relay on a real tunnel -------------------------------------------------------------------


class LoopbackRelay:
    """The relay on a fresh TUN subnet with a real loop and socket backend.

    Kernel sockets connecting to ``host(n)`` go through the tunnel and the
    relay; ``redirect`` maps those tunnel destinations to local servers.
    """

    def __init__(self, redirect: dict | None = None, config: RelayConfig | None = None,
                 resolver=None, record=None):
        self.tun, self.net = open_lab_tunnel("splr")
        self.loop = RealLoop()
        self.loop.start("lab-relay")
        self.network = RealNetwork(self.loop, redirect)
        self.relay = Relay(self.loop, self.tun, self.network, config or RelayConfig(), resolver=resolver,
                           record=record)
        self.relay.attach()

    def host(self, n: int) -> str:
        return str(self.net.network_address + n)

    def redirect(self, host: str, port: int, target: tuple[str, int]) -> None:
        self.network.redirect[(host, port)] = target

    def call(self, fn, *args):
        return self.loop.run_sync(fn, *args)

    def close(self) -> None:
        try:
            self.loop.run_sync(self.relay.close, timeout=5)
        finally:
            self.loop.stop()
            self.tun.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def timed_echo(addr: tuple[str, int], payload: bytes = b"x" * 64, timeout: float = 5.0,
               clock: MonotonicClock | None = None) -> tuple[int, int]:
    """Connect, then time one echo round trip. Returns ``(connect_ns, echo_ns)``."""
    clock = clock or MonotonicClock()
    s = socket.socket()
    s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    s.settimeout(timeout)
    try:
        t0 = clock.now_ns()
        s.connect(addr)
        t1 = clock.now_ns()
        s.sendall(payload)
        got = b""
        while len(got) < len(payload):
            chunk = s.recv(65536)
            if not chunk:
                raise ConnectionError("echo closed early")
            got += chunk
        t2 = clock.now_ns()
        if got != payload:
            raise ConnectionError("echo mismatch")
        return t1 - t0, t2 - t1
    finally:
        s.close()


def loopback_overhead(runs: int = 30, payload: bytes = b"x" * 64) -> tuple[list[float], list[float]]:
    """Relay-added delay on loopback, as per-run differences in milliseconds.

    Each run times a connect and one echo round trip straight to a local echo
    server and then through the relay, interleaved so drift hits both alike.
    Returns ``(handshake_overhead_ms, data_overhead_ms)``.
    """
    hs, data = [], []
    with EchoServer() as echo, LoopbackRelay() as rig:
        host = rig.host(2)
        rig.redirect(host, 7, echo.addr)
        timed_echo((host, 7), payload)  # warm the path once
        for _ in range(runs):
            dc, de = timed_echo(echo.addr, payload)
            rc, re_ = timed_echo((host, 7), payload)
            hs.append((rc - dc) / NS_PER_MS)
            data.append((re_ - de) / NS_PER_MS)
    return hs, data
