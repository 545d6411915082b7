"""External connections: real sockets on loopback and the simulated backend."""

import socket
import threading
import time
from ipaddress import IPv4Address

import pytest

from splicemon.clock import NS_PER_MS, NS_PER_S, RealLoop, SimLoop
from splicemon.lab import EchoServer, SaturatedListener
from splicemon.network import Behavior, ConnHandlers, RealNetwork, SimEndpoint, SimNetwork, SimProbe
from splicemon.packet import FlowKey
from splicemon.records import Outcome

pytestmark = pytest.mark.realclock


class Recorder:
    def __init__(self):
        self.events = []
        self.done = threading.Event()
        self.data = bytearray()
        self.eof = threading.Event()

    def handlers(self):
        return ConnHandlers(
            on_connected=lambda a, b: (self.events.append(("connected", b - a)), self.done.set()),
            on_failed=lambda o, a, b, r: (self.events.append((o, b - a, r)), self.done.set()),
            on_data=self.data.extend,
            on_eof=self.eof.set,
            on_error=lambda r: self.events.append(("error", r)),
        )


@pytest.fixture
def loop():
    lp = RealLoop()
    lp.start()
    yield lp
    lp.stop()


def key(port):
    return FlowKey.make(6, "10.0.0.2", 40000, "192.0.2.1", port)


def test_real_connect_echo_and_half_close(loop):
    with EchoServer() as echo:
        net = RealNetwork(loop, {("192.0.2.1", 7): echo.addr})
        rec = Recorder()
        conn = loop.run_sync(net.connect, key(7), 3 * NS_PER_S, rec.handlers())
        assert rec.done.wait(2)
        assert rec.events[0][0] == "connected" and rec.events[0][1] < 50 * NS_PER_MS
        payload = bytes(range(256)) * 1000
        loop.run_sync(conn.write, payload)
        loop.run_sync(conn.shutdown_write)
        assert rec.eof.wait(5)
        assert bytes(rec.data) == payload
        loop.run_sync(conn.close)


def test_real_refused(loop):
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    net = RealNetwork(loop, {("192.0.2.1", 9): ("127.0.0.1", port)})
    rec = Recorder()
    loop.run_sync(net.connect, key(9), 3 * NS_PER_S, rec.handlers())
    assert rec.done.wait(2)
    assert rec.events[0][0] is Outcome.REFUSED


def test_real_timeout_on_saturated_listener(loop):
    with SaturatedListener() as sl:
        net = RealNetwork(loop, {("192.0.2.1", 80): sl.addr})
        rec = Recorder()
        loop.run_sync(net.connect, key(80), 300 * NS_PER_MS, rec.handlers())
        assert rec.done.wait(3)
        outcome, elapsed, _ = rec.events[0]
        assert outcome is Outcome.TIMEOUT
        assert 300 * NS_PER_MS <= elapsed < 400 * NS_PER_MS


def test_real_pause_holds_data(loop):
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen(1)
    net = RealNetwork(loop, {("192.0.2.1", 5): srv.getsockname()})
    rec = Recorder()
    conn = loop.run_sync(net.connect, key(5), NS_PER_S, rec.handlers())
    peer, _ = srv.accept()
    assert rec.done.wait(2)
    loop.run_sync(conn.pause_reading)
    # A recv already in progress may still deliver once; nothing after that.
    peer.sendall(b"first")
    time.sleep(0.2)
    peer.sendall(b"held")
    time.sleep(0.2)
    assert bytes(rec.data) in (b"", b"first")
    loop.run_sync(conn.resume_reading)
    deadline = time.time() + 2
    while bytes(rec.data) != b"firstheld" and time.time() < deadline:
        time.sleep(0.01)
    assert bytes(rec.data) == b"firstheld"
    loop.run_sync(conn.abort)
    peer.settimeout(2)
    with pytest.raises(ConnectionResetError):
        while peer.recv(10):
            pass
    peer.close()
    srv.close()


def test_real_udp_roundtrip(loop):
    srv = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    srv.bind(("127.0.0.1", 0))
    net = RealNetwork(loop, {("192.0.2.1", 53): srv.getsockname()})
    got = []
    ev = threading.Event()
    udp = loop.run_sync(net.open_udp, FlowKey.make(17, "10.0.0.2", 5353, "192.0.2.1", 53),
                        lambda d: (got.append(d), ev.set()))
    loop.run_sync(udp.send, b"ping")
    data, addr = srv.recvfrom(100)
    srv.sendto(data[::-1], addr)
    assert ev.wait(2) and got == [b"gnip"]
    loop.run_sync(udp.close)
    srv.close()


def test_redirect_resolution():
    net = RealNetwork(None, {("10.1.0.2", 80): ("127.0.0.1", 8080), "10.1.0.3": "127.0.0.2"})
    assert net.resolve(IPv4Address("10.1.0.2"), 80) == ("127.0.0.1", 8080)
    assert net.resolve(IPv4Address("10.1.0.3"), 443) == ("127.0.0.2", 443)
    assert net.resolve(IPv4Address("10.1.0.4"), 1) == ("10.1.0.4", 1)


@pytest.mark.parametrize("behavior,outcome,at_ms", [
    ("ACCEPT", Outcome.SUCCESS, 20),
    ("REFUSE", Outcome.REFUSED, 20),
    ("UNREACHABLE", Outcome.UNREACHABLE, 20),
    ("BLACKHOLE", Outcome.TIMEOUT, 3000),
])
def test_sim_probe_outcomes(behavior, outcome, at_ms):
    loop = SimLoop()
    net = SimNetwork(loop, [SimEndpoint("192.0.2.9", 80, Behavior(behavior), 10 * NS_PER_MS)])
    att = SimProbe(net).attempt(("192.0.2.9", 80), 3 * NS_PER_S)
    assert att.outcome is outcome and att.t_end - att.t_start == at_ms * NS_PER_MS
    assert [e.origin for e in net.emissions][0] == "probe"


def test_sim_slow_handshake_times_out():
    loop = SimLoop()
    net = SimNetwork(loop, [SimEndpoint("192.0.2.9", 80, Behavior.ACCEPT, 2 * NS_PER_S)])
    att = SimProbe(net).attempt(("192.0.2.9", 80), 3 * NS_PER_S)
    assert att.outcome is Outcome.TIMEOUT and att.t_end == 3 * NS_PER_S


def test_oracle_rtt_is_round_trip():
    assert SimEndpoint("192.0.2.9", 80, one_way_ns=2_130_000).oracle_rtt_ns == 4_260_000
