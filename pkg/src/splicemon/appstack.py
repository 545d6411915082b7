"""A small app-side TCP/UDP stack that plays the role of apps behind the tunnel.

Simulated scenarios need something that speaks TCP into the tunnel the way
a kernel would. The tunnel is lossless and ordered, so this stack skips
retransmission of data; it does retransmit SYNs on the usual schedule
because the relay defers its SYN-ACK until the outbound connect resolves.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import random
from dataclasses import dataclass, field
from typing import Callable

from .clock import NS_PER_S
from .packet import (
    FlowKey,
    IpProto,
    PacketError,
    TcpFlags,
    TcpSegment,
    UdpDatagram,
    as_addr,
    flow_key_of,
    mss_option,
    parse_ipv4,
    parse_tcp,
    parse_udp,
    seq_add,
    seq_diff,
    tcp_packet,
    udp_packet,
)

log = logging.getLogger(__name__)

SYN_RETRIES_NS = (1 * NS_PER_S, 3 * NS_PER_S, 7 * NS_PER_S)


class SockState(enum.Enum):
    SYN_SENT = "SYN_SENT"
    ESTABLISHED = "ESTABLISHED"
    CLOSED = "CLOSED"
    RESET = "RESET"


@dataclass
class AppSocket:
    stack: "AppStack"
    key: FlowKey
    iss: int
    state: SockState = SockState.SYN_SENT
    snd_una: int = 0
    snd_nxt: int = 0
    rcv_nxt: int = 0
    peer_window: int = 0
    peer_mss: int = 536
    unsent: bytearray = field(default_factory=bytearray)
    received: bytearray = field(default_factory=bytearray)
    unread: int = 0
    auto_read: bool = True
    close_requested: bool = False
    fin_sent: bool = False
    fin_seq: int | None = None
    peer_fin: bool = False
    bytes_sent: int = 0
    t_syn: int | None = None
    t_synack: int | None = None
    t_reset: int | None = None
    t_eof: int | None = None
    syns_sent: int = 0
    on_established: Callable[["AppSocket"], None] | None = None
    on_data: Callable[["AppSocket", bytes], None] | None = None

    @property
    def handshake_ns(self) -> int | None:
        if self.t_syn is None or self.t_synack is None:
            return None
        return self.t_synack - self.t_syn

    @property
    def fin_acked(self) -> bool:
        return self.fin_sent and self.snd_una == self.snd_nxt

    @property
    def done(self) -> bool:
        return self.state in (SockState.CLOSED, SockState.RESET)

    def digest(self) -> str:
        return hashlib.sha256(self.received).hexdigest()

    # -- user API ------------------------------------------------------------------

    def send(self, data: bytes) -> None:
        if self.close_requested or self.state is SockState.RESET:
            return
        self.unsent += data
        self.bytes_sent += len(data)
        self._pump()

    def close(self) -> None:
        self.close_requested = True
        self._pump()

    def reset(self) -> None:
        if self.state in (SockState.SYN_SENT, SockState.ESTABLISHED):
            self._out(TcpFlags.RST | TcpFlags.ACK, seq=self.snd_nxt)
            self.state = SockState.RESET

    def read(self, n: int | None = None) -> None:
        """Consume ``n`` unread bytes (all by default) and announce the opened window."""
        n = self.unread if n is None else min(n, self.unread)
        self.unread -= n
        if n and self.state is SockState.ESTABLISHED:
            self._out(TcpFlags.ACK)

    # -- wire ----------------------------------------------------------------------

    @property
    def window(self) -> int:
        return max(0, self.stack.window - self.unread)

    def _out(self, flags, seq=None, payload=b"", options=b"") -> None:
        seg = TcpSegment(self.key.src_port, self.key.dst_port,
                         seq=self.snd_nxt if seq is None else seq,
                         ack=self.rcv_nxt if flags & TcpFlags.ACK else 0,
                         flags=flags, window=self.window, payload=payload, options=options)
        self.stack.transmit(tcp_packet(self.key.src_addr, self.key.dst_addr, seg, ident=self.stack.next_ident()))

    def _syn(self) -> None:
        if self.state is not SockState.SYN_SENT:
            return
        if self.t_syn is None:
            self.t_syn = self.stack.loop.now_ns()
        self.syns_sent += 1
        self._out(TcpFlags.SYN, seq=self.iss, options=mss_option(self.stack.mss))

    def _pump(self) -> None:
        if self.state is not SockState.ESTABLISHED:
            return
        mss = min(self.peer_mss, self.stack.mss)
        while self.unsent:
            room = self.peer_window - seq_diff(self.snd_nxt, self.snd_una)
            if room <= 0:
                break
            n = min(mss, room, len(self.unsent))
            chunk = bytes(self.unsent[:n])
            del self.unsent[:n]
            flags = TcpFlags.ACK | (TcpFlags.PSH if not self.unsent else TcpFlags(0))
            self._out(flags, payload=chunk)
            self.snd_nxt = seq_add(self.snd_nxt, n)
        if self.close_requested and not self.unsent and not self.fin_sent:
            self._out(TcpFlags.FIN | TcpFlags.ACK)
            self.fin_seq = self.snd_nxt
            self.snd_nxt = seq_add(self.snd_nxt, 1)
            self.fin_sent = True
            self._maybe_closed()

    def _maybe_closed(self) -> None:
        if self.fin_acked and self.peer_fin and self.state is SockState.ESTABLISHED:
            self.state = SockState.CLOSED

    def segment_in(self, seg: TcpSegment) -> None:
        now = self.stack.loop.now_ns()
        if seg.has(TcpFlags.RST):
            if self.state in (SockState.SYN_SENT, SockState.ESTABLISHED):
                self.state = SockState.RESET
                self.t_reset = now
            return
        if self.state is SockState.SYN_SENT:
            if seg.has(TcpFlags.SYN) and seg.has(TcpFlags.ACK) and seg.ack == seq_add(self.iss, 1):
                self.t_synack = now
                self.state = SockState.ESTABLISHED
                self.rcv_nxt = seq_add(seg.seq, 1)
                self.snd_una = self.snd_nxt = seq_add(self.iss, 1)
                self.peer_window = seg.window
                self.peer_mss = seg.mss or 536
                self._out(TcpFlags.ACK)
                if self.on_established:
                    self.on_established(self)
                self._pump()
            return
        if self.state is not SockState.ESTABLISHED:
            return
        if seg.has(TcpFlags.SYN):
            self._out(TcpFlags.ACK)  # retransmitted SYN-ACK
            return
        if seg.has(TcpFlags.ACK):
            if 0 < seq_diff(seg.ack, self.snd_una) <= seq_diff(self.snd_nxt, self.snd_una):
                self.snd_una = seg.ack
            self.peer_window = seg.window
        ack_needed = False
        if seg.payload or seg.has(TcpFlags.FIN):
            if seg.seq != self.rcv_nxt:
                self._out(TcpFlags.ACK)
                return
            if seg.payload:
                self.received += seg.payload
                self.rcv_nxt = seq_add(self.rcv_nxt, len(seg.payload))
                self.unread += len(seg.payload)
                if self.auto_read:
                    self.unread = 0
                if self.on_data:
                    self.on_data(self, seg.payload)
                ack_needed = True
            if seg.has(TcpFlags.FIN) and not self.peer_fin:
                self.peer_fin = True
                self.t_eof = now
                self.rcv_nxt = seq_add(self.rcv_nxt, 1)
                ack_needed = True
        if ack_needed:
            self._out(TcpFlags.ACK)
        self._pump()
        self._maybe_closed()


@dataclass
class UdpExchange:
    key: FlowKey
    sent: list[bytes] = field(default_factory=list)
    received: list[bytes] = field(default_factory=list)


class AppStack:
    """All app sockets behind one tunnel address."""

    def __init__(self, loop, channel, addr: str = "10.0.0.2", mss: int = 1460, window: int = 65535,
                 seed: int = 0, tap: Callable[[str, int, bytes], None] | None = None,
                 syn_retries: tuple[int, ...] = SYN_RETRIES_NS):
        self.loop = loop
        self.channel = channel
        self.addr = as_addr(addr)
        self.mss = mss
        self.window = window
        self.rng = random.Random(seed)
        self.tap = tap
        self.syn_retries = syn_retries
        self.sockets: dict[FlowKey, AppSocket] = {}
        self.udp: dict[FlowKey, UdpExchange] = {}
        self._ident = 0
        self._next_port = 40000
        self.unmatched = 0
        channel.set_receiver(self.receive)

    def next_ident(self) -> int:
        self._ident = (self._ident + 1) & 0xFFFF
        return self._ident

    def ephemeral_port(self) -> int:
        self._next_port += 1
        return self._next_port

    def transmit(self, raw: bytes) -> None:
        if self.tap:
            self.tap("app->relay", self.loop.now_ns(), raw)
        self.channel.write_packet(raw)

    def connect(self, dst: str, dport: int, sport: int | None = None) -> AppSocket:
        key = FlowKey.make(6, self.addr, sport or self.ephemeral_port(), dst, dport)
        if key in self.sockets and not self.sockets[key].done:
            raise ValueError(f"flow {key} already open")
        sock = AppSocket(self, key, self.rng.getrandbits(32))
        self.sockets[key] = sock
        sock._syn()
        for delay in self.syn_retries:
            self.loop.call_later(delay, sock._syn)
        return sock

    def send_udp(self, dst: str, dport: int, payload: bytes, sport: int | None = None) -> UdpExchange:
        if sport is None:
            existing = [k for k in self.udp if k.dst_addr == as_addr(dst) and k.dst_port == dport]
            sport = existing[0].src_port if existing else self.ephemeral_port()
        key = FlowKey.make(17, self.addr, sport, dst, dport)
        ex = self.udp.setdefault(key, UdpExchange(key))
        ex.sent.append(bytes(payload))
        self.transmit(udp_packet(self.addr, key.dst_addr, UdpDatagram(sport, dport, bytes(payload)),
                                 ident=self.next_ident()))
        return ex

    def receive(self, raw: bytes) -> None:
        if self.tap:
            self.tap("relay->app", self.loop.now_ns(), raw)
        try:
            pkt = parse_ipv4(raw, strict=True)
            key = flow_key_of(pkt).reversed()
            if pkt.protocol == IpProto.TCP:
                seg = parse_tcp(pkt, strict=True)
                sock = self.sockets.get(key)
                if sock is None:
                    self.unmatched += 1
                    return
                sock.segment_in(seg)
            else:
                dgram = parse_udp(pkt, strict=True)
                ex = self.udp.get(key)
                if ex is None:
                    self.unmatched += 1
                    return
                ex.received.append(dgram.payload)
        except PacketError as exc:
            # A checksum failure here would be a relay bug; surface it loudly.
            log.error("app stack got a bad packet: %s", exc)
            raise
