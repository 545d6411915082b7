"""Real-clock rigs: TUN delay line and the relay on a real tunnel."""

import hashlib
import random
import socket
import threading
import time

import pytest

from splicemon import lab
from splicemon.clock import NS_PER_MS
from splicemon.flows import MapResolver
from splicemon.records import FailureClass, Outcome
from splicemon.relay import RelayConfig
from splicemon.rtt import SocketProbe, time_connect

pytestmark = [pytest.mark.tun, pytest.mark.realclock]


@pytest.fixture
def delay_line():
    try:
        tun, net = lab.open_lab_tunnel()
    except OSError as exc:
        pytest.skip(f"tunnel unavailable: {exc}")
    host = lambda n: str(net.network_address + n)  # noqa: E731
    resp = lab.DelayLineResponder(tun, {host(2): 20 * NS_PER_MS, host(3): "refuse"})
    with resp:
        yield resp, host
    tun.close()


@pytest.fixture
def relay_rig():
    try:
        rig = lab.LoopbackRelay(config=RelayConfig(connect_timeout_ns=500 * NS_PER_MS),
                                resolver=MapResolver({"41001": "fixture-app"}))
    except OSError as exc:
        pytest.skip(f"tunnel unavailable: {exc}")
    with rig:
        yield rig


def test_delay_line_reference_and_meter(delay_line):
    resp, host = delay_line
    s = time_connect((host(2), 443), probe=SocketProbe())
    hs = resp.take(host(2))
    assert s.outcome is Outcome.SUCCESS
    assert abs(hs.reference_ns - 20 * NS_PER_MS) < NS_PER_MS
    assert abs(s.rtt_ns - hs.reference_ns) < 2 * NS_PER_MS


def test_delay_line_refuse_and_blackhole(delay_line):
    resp, host = delay_line
    assert time_connect((host(3), 80), probe=SocketProbe()).outcome is Outcome.REFUSED
    s = time_connect((host(9), 80), timeout_ns=200 * NS_PER_MS, probe=SocketProbe())
    assert s.outcome is Outcome.TIMEOUT and s.rtt_ns >= 200 * NS_PER_MS
    assert resp.ignored >= 1


def test_saturated_listener_drops_syns():
    with lab.SaturatedListener() as sl:
        assert sl.is_saturated()


def test_relay_echo_half_close_and_attribution(relay_rig):
    with lab.EchoServer() as echo:
        h = relay_rig.host(2)
        relay_rig.redirect(h, 7, echo.addr)
        data = random.Random(3).randbytes(200_000)
        s = socket.socket()
        s.bind(("0.0.0.0", 41001))
        s.settimeout(10)
        s.connect((h, 7))
        got = bytearray()

        def reader():
            while chunk := s.recv(65536):
                got.extend(chunk)

        t = threading.Thread(target=reader)
        t.start()
        s.sendall(data)
        s.shutdown(socket.SHUT_WR)
        t.join(20)
        s.close()
        assert hashlib.sha256(got).digest() == hashlib.sha256(data).digest()
        time.sleep(0.1)
        samples = relay_rig.call(lambda: list(relay_rig.relay.samples))
        assert [(x.app.name, x.outcome) for x in samples] == [("fixture-app", Outcome.SUCCESS)]


def test_relay_refused_and_timeout(relay_rig):
    closed = socket.socket()
    closed.bind(("127.0.0.1", 0))
    port = closed.getsockname()[1]
    closed.close()
    relay_rig.redirect(relay_rig.host(3), 80, ("127.0.0.1", port))
    s = socket.socket()
    s.settimeout(3)
    assert s.connect_ex((relay_rig.host(3), 80)) != 0
    s.close()
    with lab.SaturatedListener() as sl:
        relay_rig.redirect(relay_rig.host(4), 80, sl.addr)
        s = socket.socket()
        s.settimeout(3)
        assert s.connect_ex((relay_rig.host(4), 80)) != 0
        s.close()
    time.sleep(0.1)
    fails = relay_rig.call(lambda: [f.cls for f in relay_rig.relay.failures])
    assert fails == [FailureClass.REFUSED, FailureClass.TIMEOUT]
    timeout = relay_rig.call(lambda: relay_rig.relay.samples[-1])
    assert 500 * NS_PER_MS <= timeout.rtt_ns < 600 * NS_PER_MS


def test_timed_echo_direct():
    with lab.EchoServer() as echo:
        c, e = lab.timed_echo(echo.addr, b"abc")
        assert 0 < c < 50 * NS_PER_MS and 0 < e < 50 * NS_PER_MS
