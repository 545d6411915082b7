import socket
import struct
import threading

import dpkt
import pytest

from splicemon.clock import NS_PER_MS, SimLoop
from splicemon.netio import (
    BadMagic,
    CaptureReader,
    CaptureWriter,
    ChannelClosed,
    DeviceBusy,
    OversizePacket,
    TunChannel,
    TunError,
    memory_pair,
    pair_handshakes,
    sim_channel,
)
from splicemon.packet import FlowKey, TcpFlags, TcpSegment, parse_ipv4, parse_tcp, tcp_packet

from conftest import KERNEL_SYN


def seg_pkt(src, sport, dst, dport, flags, seq=1, ack=0):
    return tcp_packet(src, dst, TcpSegment(sport, dport, seq=seq, ack=ack, flags=flags))


def write_dpkt(path, frames, linktype=dpkt.pcap.DLT_RAW, nano=False):
    with open(path, "wb") as fh:
        w = dpkt.pcap.Writer(fh, linktype=linktype, nano=nano)
        for ts, frame in frames:
            w.writepkt(frame, ts=ts)


def test_empty_capture(tmp_path):
    p = tmp_path / "empty.pcap"
    write_dpkt(p, [])
    assert list(CaptureReader(p)) == []


def test_bad_magic(tmp_path):
    p = tmp_path / "junk.pcap"
    p.write_bytes(b"\x0a\x0d\x0d\x0a" + bytes(40))  # pcapng section header
    with pytest.raises(BadMagic):
        CaptureReader(p)


def test_dpkt_written_capture_relative_ns(tmp_path):
    p = tmp_path / "raw.pcap"
    write_dpkt(p, [(100.000001, KERNEL_SYN), (100.004261, KERNEL_SYN)])
    recs = list(CaptureReader(p))
    assert [r.ts_ns for r in recs] == [0, 4_260_000]
    assert recs[0].data == KERNEL_SYN


def test_byte_swapped_capture(tmp_path):
    p = tmp_path / "be.pcap"
    with CaptureWriter(p, big_endian=True, nanosecond=False) as w:
        w.write(5_000_000_000, KERNEL_SYN)
        w.write(5_000_250_000, KERNEL_SYN)
    r = CaptureReader(p)
    assert r.endian == ">"
    assert [x.ts_ns for x in r] == [0, 250_000]
    # Independent check: dpkt agrees on the swapped header.
    with open(p, "rb") as fh:
        assert [ts for ts, _ in dpkt.pcap.Reader(fh)] == [5.0, 5.00025]


def test_our_writer_read_by_dpkt(tmp_path):
    p = tmp_path / "ours.pcap"
    with CaptureWriter(p, nanosecond=True) as w:
        w.write(1_234_567_891, KERNEL_SYN)
    with open(p, "rb") as fh:
        [(ts, buf)] = list(dpkt.pcap.Reader(fh))
    assert buf == KERNEL_SYN and str(ts) == "1.234567891"


@pytest.mark.parametrize(
    "linktype,wrap",
    [
        (dpkt.pcap.DLT_EN10MB, lambda ip: b"\x02" * 6 + b"\x04" * 6 + b"\x08\x00" + ip),
        (dpkt.pcap.DLT_EN10MB, lambda ip: b"\x02" * 12 + b"\x81\x00\x00\x05\x08\x00" + ip),
        (dpkt.pcap.DLT_NULL, lambda ip: struct.pack("<I", 2) + ip),
        (113, lambda ip: bytes(14) + b"\x08\x00" + ip),
        (228, lambda ip: ip),
    ],
)
def test_link_types(tmp_path, linktype, wrap):
    p = tmp_path / "l.pcap"
    write_dpkt(p, [(1.0, wrap(KERNEL_SYN))], linktype=linktype)
    assert [r.data for r in CaptureReader(p)] == [KERNEL_SYN]


def test_non_ip_frames_skipped(tmp_path):
    p = tmp_path / "arp.pcap"
    write_dpkt(p, [(1.0, b"\x02" * 12 + b"\x08\x06" + bytes(28))], linktype=dpkt.pcap.DLT_EN10MB)
    r = CaptureReader(p)
    assert list(r) == [] and r.skipped == 1


def test_truncated_record_counted(tmp_path):
    p = tmp_path / "t.pcap"
    write_dpkt(p, [(1.0, KERNEL_SYN), (2.0, KERNEL_SYN)])
    p.write_bytes(p.read_bytes()[:-10])
    r = CaptureReader(p)
    assert len(list(r)) == 1 and r.truncated == 1


def test_timestamps_nondecreasing(tmp_path):
    p = tmp_path / "r.pcap"
    write_dpkt(p, [(2.0, KERNEL_SYN), (1.5, KERNEL_SYN), (3.0, KERNEL_SYN)])
    r = CaptureReader(p)
    ts = [x.ts_ns for x in r]
    assert ts == sorted(ts) and r.clamped == 1


def test_three_flow_capture_pairs(tmp_path):
    p = tmp_path / "3.pcap"
    flows = [("10.0.0.2", 40000 + i, f"93.184.216.{30 + i}", 443) for i in range(3)]
    with CaptureWriter(p) as w:
        t = 0
        for src, sport, dst, dport in flows:
            w.write(t, seg_pkt(src, sport, dst, dport, TcpFlags.SYN))
            t += 1000
        for i, (src, sport, dst, dport) in enumerate(flows):
            w.write(t + i * 5 * NS_PER_MS, seg_pkt(dst, dport, src, sport, TcpFlags.SYN | TcpFlags.ACK, ack=2))
    pairs = pair_handshakes(CaptureReader(p))
    assert set(pairs) == {FlowKey.make(6, *f) for f in flows}
    k0 = FlowKey.make(6, *flows[0])
    assert pairs[k0][1] - pairs[k0][0] == 3000 - 0


def test_pairing_uses_first_syn():
    key_pkt = seg_pkt("10.0.0.2", 1, "1.2.3.4", 80, TcpFlags.SYN)
    resp = seg_pkt("1.2.3.4", 80, "10.0.0.2", 1, TcpFlags.SYN | TcpFlags.ACK)
    pairs = pair_handshakes([(0, key_pkt), (1000, key_pkt), (1500, resp)])
    assert list(pairs.values()) == [(0, 1500)]


# -- in-memory channels --------------------------------------------------------------


def test_sim_channel_identity_and_delay():
    loop = SimLoop()
    a, b = sim_channel(loop, delay_ns=5 * NS_PER_MS)
    loop.advance(NS_PER_MS)
    a.write_packet(KERNEL_SYN)
    assert b.read_packet() == KERNEL_SYN
    assert loop.now_ns() == 6 * NS_PER_MS


def test_sim_channel_asymmetric_and_timeout():
    loop = SimLoop()
    a, b = sim_channel(loop, delay_ns=(1000, 7000))
    b.write_packet(b"\x45x")
    assert a.read_packet(timeout=5e-6) is None
    assert loop.now_ns() == 5000
    assert a.read_packet() == b"\x45x" and loop.now_ns() == 7000


def test_sim_channel_order_10k():
    loop = SimLoop()
    a, b = sim_channel(loop, delay_ns=100)
    got = []
    b.set_receiver(got.append)
    for i in range(10_000):
        a.write_packet(struct.pack("!I", i))
        if i % 7 == 0:
            loop.advance(13)
            a.delay_ns = (i * 31) % 500  # jitter must not reorder
    loop.run()
    assert [struct.unpack("!I", x)[0] for x in got] == list(range(10_000))


def test_sim_channel_mtu_and_close():
    loop = SimLoop()
    a, b = sim_channel(loop, mtu=100)
    with pytest.raises(OversizePacket):
        a.write_packet(bytes(101))
    b.close()
    with pytest.raises(ChannelClosed):
        a.write_packet(b"x")


def test_memory_pair_across_threads():
    a, b = memory_pair()
    n = 2000

    def producer():
        for i in range(n):
            a.write_packet(struct.pack("!I", i))

    t = threading.Thread(target=producer)
    t.start()
    got = [struct.unpack("!I", b.read_packet(timeout=5))[0] for _ in range(n)]
    t.join()
    assert got == list(range(n))
    assert b.read_packet(timeout=0.01) is None
    a.close()
    with pytest.raises(ChannelClosed):
        b.read_packet(timeout=1)


# -- tunnel device -----------------------------------------------------------------


@pytest.fixture
def tun():
    try:
        chan = TunChannel.open("smtest0", 1500, "10.77.0.1/24")
    except TunError as exc:
        pytest.skip(f"tunnel unavailable: {exc}")
    yield chan
    chan.close()


@pytest.mark.tun
def test_tunnel_sees_kernel_syn(tun, tmp_path):
    s = socket.socket()
    s.setblocking(False)
    try:
        s.connect_ex(("10.77.0.2", 8080))
        lport = s.getsockname()[1]
        pkt = None
        for _ in range(20):
            raw = tun.read_packet(timeout=1.0)
            assert raw is not None
            if raw[0] >> 4 != 4:
                continue  # kernel IPv6 chatter on a fresh link
            ip = parse_ipv4(raw)
            if ip.protocol == 6 and parse_tcp(ip).dst_port == 8080:
                pkt = raw
                break
        seg = parse_tcp(parse_ipv4(pkt))
        assert seg.flags == TcpFlags.SYN and seg.src_port == lport and seg.checksum_ok
        # Self-capture: the datagram survives a capture round trip.
        cap = tmp_path / "tun.pcap"
        with CaptureWriter(cap) as w:
            w.write(0, pkt)
        assert [r.data for r in CaptureReader(cap)] == [pkt]
    finally:
        s.close()


@pytest.mark.tun
def test_tunnel_oversize_and_double_open(tun):
    with pytest.raises(OversizePacket):
        tun.write_packet(bytes(1501))
    with pytest.raises(DeviceBusy):
        TunChannel.open("smtest0", 1500)
    # The original device is still usable afterwards.
    tun.write_packet(seg_pkt("10.77.0.2", 9, "10.77.0.1", 9, TcpFlags.RST))
