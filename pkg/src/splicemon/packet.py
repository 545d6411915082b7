"""IPv4, TCP and UDP wire codec.

Parsing never rejects a packet for a bad checksum unless ``strict`` is set;
instead the decoded object carries ``checksum_ok``. Serializers always
compute fresh checksums, so whatever checksum a caller stored is ignored.

TCP options are kept as opaque bytes. Only MSS (kind 2) is interpreted.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum, IntFlag
from ipaddress import IPv4Address
from typing import NamedTuple, Union

from .checksum import internet_checksum, pseudo_header_sum

MAX_IP_TOTAL = 65535
SEQ_MOD = 1 << 32


class PacketError(ValueError):
    """Base class for codec errors."""


class TruncatedPacket(PacketError):
    pass


class MalformedPacket(PacketError):
    pass


class UnsupportedVersion(PacketError):
    def __init__(self, version: int):
        super().__init__(f"unsupported IP version {version}")
        self.version = version


class BadChecksum(PacketError):
    pass


class FieldOverflow(PacketError):
    pass


class TruncatedSegment(PacketError):
    pass


class UnsupportedProtocol(PacketError):
    pass


class IpProto(IntEnum):
    TCP = 6
    UDP = 17


class TcpFlags(IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10
    URG = 0x20
    ECE = 0x40
    CWR = 0x80

    def __str__(self) -> str:
        names = [f.name for f in TcpFlags if f in self]
        return "|".join(names) if names else "NONE"


Address = Union[IPv4Address, str, int]


def as_addr(value: Address) -> IPv4Address:
    return value if isinstance(value, IPv4Address) else IPv4Address(value)


# -- sequence arithmetic (mod 2**32) ------------------------------------------


def seq_add(a: int, n: int) -> int:
    return (a + n) % SEQ_MOD


def seq_diff(a: int, b: int) -> int:
    """Distance from ``b`` forward to ``a``, i.e. ``(a - b) mod 2**32``."""
    return (a - b) % SEQ_MOD


def seq_lt(a: int, b: int) -> bool:
    """Wrap-safe ``a < b``: true iff ``(b - a) mod 2**32`` is in ``(0, 2**31)``."""
    d = (b - a) % SEQ_MOD
    return 0 < d < (1 << 31)


def seq_leq(a: int, b: int) -> bool:
    return a == b or seq_lt(a, b)


# -- IPv4 ----------------------------------------------------------------------

_IPV4_HDR = struct.Struct("!BBHHHBBH4s4s")


@dataclass
class Ipv4Packet:
    src: IPv4Address
    dst: IPv4Address
    protocol: int
    payload: bytes = b""
    ttl: int = 64
    tos: int = 0
    identification: int = 0
    flags: int = 0
    fragment_offset: int = 0
    options: bytes = b""
    version: int = 4
    header_checksum: int = 0
    checksum_ok: bool = True

    @property
    def header_length(self) -> int:
        return 20 + len(self.options)

    @property
    def total_length(self) -> int:
        return self.header_length + len(self.payload)


def parse_ipv4(raw: bytes, strict: bool = False) -> Ipv4Packet:
    """Decode one IPv4 datagram.

    Trailing bytes beyond the declared total length (link padding) are
    ignored. With ``strict`` a header checksum mismatch raises
    :class:`BadChecksum`; otherwise it is recorded in ``checksum_ok``.
    """
    raw = bytes(raw)
    if raw and raw[0] >> 4 != 4:
        raise UnsupportedVersion(raw[0] >> 4)
    if len(raw) < 20:
        raise TruncatedPacket(f"{len(raw)} bytes is shorter than an IPv4 header")
    ver_ihl, tos, total, ident, frag, ttl, proto, csum, src, dst = _IPV4_HDR.unpack_from(raw)
    version = ver_ihl >> 4
    if version != 4:
        raise UnsupportedVersion(version)
    hlen = (ver_ihl & 0x0F) * 4
    if hlen < 20:
        raise MalformedPacket(f"header length {hlen} below minimum")
    if total < hlen:
        raise MalformedPacket(f"total length {total} smaller than header {hlen}")
    if len(raw) < total:
        raise TruncatedPacket(f"declared {total} bytes, have {len(raw)}")
    ok = internet_checksum(raw[:hlen]) == 0
    if strict and not ok:
        raise BadChecksum("IPv4 header checksum mismatch")
    return Ipv4Packet(
        src=IPv4Address(src),
        dst=IPv4Address(dst),
        protocol=proto,
        payload=raw[hlen:total],
        ttl=ttl,
        tos=tos,
        identification=ident,
        flags=frag >> 13,
        fragment_offset=frag & 0x1FFF,
        options=raw[20:hlen],
        version=version,
        header_checksum=csum,
        checksum_ok=ok,
    )


def serialize_ipv4(pkt: Ipv4Packet) -> bytes:
    """Encode ``pkt`` with a freshly computed header checksum."""
    if len(pkt.options) % 4 or len(pkt.options) > 40:
        raise FieldOverflow("IPv4 options must be a multiple of 4 bytes, at most 40")
    if pkt.total_length > MAX_IP_TOTAL:
        raise FieldOverflow(f"payload of {len(pkt.payload)} bytes exceeds 65535 - header length")
    for name, value, limit in (
        ("ttl", pkt.ttl, 0xFF),
        ("tos", pkt.tos, 0xFF),
        ("protocol", pkt.protocol, 0xFF),
        ("identification", pkt.identification, 0xFFFF),
        ("flags", pkt.flags, 0x7),
        ("fragment_offset", pkt.fragment_offset, 0x1FFF),
    ):
        if not 0 <= value <= limit:
            raise FieldOverflow(f"{name}={value} out of range")
    header = bytearray(
        _IPV4_HDR.pack(
            0x40 | (pkt.header_length // 4),
            pkt.tos,
            pkt.total_length,
            pkt.identification,
            (pkt.flags << 13) | pkt.fragment_offset,
            pkt.ttl,
            pkt.protocol,
            0,
            as_addr(pkt.src).packed,
            as_addr(pkt.dst).packed,
        )
    )
    header += pkt.options
    struct.pack_into("!H", header, 10, internet_checksum(header))
    return bytes(header) + pkt.payload


# -- TCP -----------------------------------------------------------------------

_TCP_HDR = struct.Struct("!HHIIBBHHH")

OPT_END = 0
OPT_NOP = 1
OPT_MSS = 2


def mss_option(mss: int) -> bytes:
    return struct.pack("!BBH", OPT_MSS, 4, mss)


def parse_options(options: bytes) -> list[tuple[int, bytes]]:
    """Split raw TCP options into ``(kind, data)`` pairs; stops at malformed input."""
    out = []
    i = 0
    while i < len(options):
        kind = options[i]
        if kind == OPT_END:
            break
        if kind == OPT_NOP:
            i += 1
            continue
        if i + 1 >= len(options):
            break
        length = options[i + 1]
        if length < 2 or i + length > len(options):
            break
        out.append((kind, options[i + 2 : i + length]))
        i += length
    return out


@dataclass
class TcpSegment:
    src_port: int
    dst_port: int
    seq: int = 0
    ack: int = 0
    flags: TcpFlags = TcpFlags(0)
    window: int = 65535
    urgent: int = 0
    options: bytes = b""
    payload: bytes = b""
    reserved: int = 0
    checksum: int = 0
    checksum_ok: bool = True
    checksum_offloaded: bool = False

    @property
    def data_offset(self) -> int:
        return 5 + (len(self.options) + 3) // 4

    @property
    def mss(self) -> int | None:
        for kind, data in parse_options(self.options):
            if kind == OPT_MSS and len(data) == 2:
                return struct.unpack("!H", data)[0]
        return None

    @property
    def seq_len(self) -> int:
        """Sequence space consumed: payload plus one each for SYN and FIN."""
        return len(self.payload) + (TcpFlags.SYN in self.flags) + (TcpFlags.FIN in self.flags)

    def has(self, flag: TcpFlags) -> bool:
        return bool(self.flags & flag)


def _transport_sum(ip: Ipv4Packet) -> int:
    return pseudo_header_sum(int(ip.src), int(ip.dst), ip.protocol, len(ip.payload))


def parse_tcp(ip: Ipv4Packet, strict: bool = False) -> TcpSegment:
    if ip.protocol != IpProto.TCP:
        raise UnsupportedProtocol(f"protocol {ip.protocol} is not TCP")
    data = ip.payload
    if len(data) < 20:
        raise TruncatedSegment(f"{len(data)} bytes is shorter than a TCP header")
    sport, dport, seq, ack, off, flags, window, csum, urg = _TCP_HDR.unpack_from(data)
    hlen = (off >> 4) * 4
    if hlen < 20 or hlen > len(data):
        raise TruncatedSegment(f"data offset {hlen} inconsistent with {len(data)} bytes")
    pseudo = _transport_sum(ip)
    ok = internet_checksum(data, pseudo) == 0
    offloaded = not ok and csum == pseudo
    if strict and not ok:
        raise BadChecksum("TCP checksum mismatch")
    return TcpSegment(
        src_port=sport,
        dst_port=dport,
        seq=seq,
        ack=ack,
        flags=TcpFlags(flags),
        window=window,
        urgent=urg,
        options=data[20:hlen],
        payload=data[hlen:],
        reserved=off & 0x0F,
        checksum=csum,
        checksum_ok=ok,
        checksum_offloaded=offloaded,
    )


def serialize_tcp(seg: TcpSegment, src: Address, dst: Address) -> bytes:
    """Encode ``seg`` with its checksum computed over the IPv4 pseudo-header."""
    opts = seg.options + b"\x00" * (-len(seg.options) % 4)
    hlen = 20 + len(opts)
    if hlen > 60:
        raise FieldOverflow("TCP options exceed 40 bytes")
    body = bytearray(
        _TCP_HDR.pack(
            seg.src_port,
            seg.dst_port,
            seg.seq % SEQ_MOD,
            seg.ack % SEQ_MOD,
            ((hlen // 4) << 4) | (seg.reserved & 0x0F),
            int(seg.flags) & 0xFF,
            seg.window,
            0,
            seg.urgent,
        )
    )
    body += opts
    body += seg.payload
    pseudo = pseudo_header_sum(int(as_addr(src)), int(as_addr(dst)), IpProto.TCP, len(body))
    struct.pack_into("!H", body, 16, internet_checksum(body, pseudo))
    return bytes(body)


# -- UDP -----------------------------------------------------------------------

_UDP_HDR = struct.Struct("!HHHH")


@dataclass
class UdpDatagram:
    src_port: int
    dst_port: int
    payload: bytes = b""
    checksum: int = 0
    checksum_ok: bool = True

    @property
    def length(self) -> int:
        return 8 + len(self.payload)


def parse_udp(ip: Ipv4Packet, strict: bool = False) -> UdpDatagram:
    if ip.protocol != IpProto.UDP:
        raise UnsupportedProtocol(f"protocol {ip.protocol} is not UDP")
    data = ip.payload
    if len(data) < 8:
        raise TruncatedSegment(f"{len(data)} bytes is shorter than a UDP header")
    sport, dport, length, csum = _UDP_HDR.unpack_from(data)
    if length < 8 or length > len(data):
        raise TruncatedSegment(f"UDP length {length} inconsistent with {len(data)} bytes")
    # A zero checksum means the sender did not compute one.
    ok = csum == 0 or internet_checksum(data[:length], pseudo_header_sum(
        int(ip.src), int(ip.dst), IpProto.UDP, length)) == 0
    if strict and not ok:
        raise BadChecksum("UDP checksum mismatch")
    return UdpDatagram(sport, dport, data[8:length], csum, ok)


def serialize_udp(dgram: UdpDatagram, src: Address, dst: Address) -> bytes:
    length = dgram.length
    if length > MAX_IP_TOTAL - 20:
        raise FieldOverflow("UDP payload too large")
    body = bytearray(_UDP_HDR.pack(dgram.src_port, dgram.dst_port, length, 0)) + dgram.payload
    pseudo = pseudo_header_sum(int(as_addr(src)), int(as_addr(dst)), IpProto.UDP, length)
    csum = internet_checksum(body, pseudo) or 0xFFFF
    struct.pack_into("!H", body, 6, csum)
    return bytes(body)


# -- flows ---------------------------------------------------------------------


class FlowKey(NamedTuple):
    """5-tuple flow identity. Tuple ordering gives a total order."""

    protocol: IpProto
    src_addr: IPv4Address
    src_port: int
    dst_addr: IPv4Address
    dst_port: int

    def reversed(self) -> "FlowKey":
        return FlowKey(self.protocol, self.dst_addr, self.dst_port, self.src_addr, self.src_port)

    def __str__(self) -> str:
        return f"{self.protocol.name} {self.src_addr}:{self.src_port} -> {self.dst_addr}:{self.dst_port}"

    @classmethod
    def make(cls, protocol, src_addr, src_port, dst_addr, dst_port) -> "FlowKey":
        return cls(IpProto(protocol), as_addr(src_addr), int(src_port), as_addr(dst_addr), int(dst_port))

    def as_dict(self) -> dict:
        return {
            "protocol": self.protocol.name,
            "src_addr": str(self.src_addr),
            "src_port": self.src_port,
            "dst_addr": str(self.dst_addr),
            "dst_port": self.dst_port,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FlowKey":
        return cls.make(IpProto[d["protocol"]], d["src_addr"], d["src_port"], d["dst_addr"], d["dst_port"])


def flow_key_of(pkt: Ipv4Packet) -> FlowKey:
    """Direction-sensitive key: the packet's source stays the key's source."""
    if pkt.protocol not in (IpProto.TCP, IpProto.UDP):
        raise UnsupportedProtocol(f"no flow key for protocol {pkt.protocol}")
    if len(pkt.payload) < 4:
        raise TruncatedSegment("transport header too short for ports")
    sport, dport = struct.unpack_from("!HH", pkt.payload)
    return FlowKey(IpProto(pkt.protocol), pkt.src, sport, pkt.dst, dport)


# -- builders ------------------------------------------------------------------


def tcp_packet(src: Address, dst: Address, seg: TcpSegment, ttl: int = 64, ident: int = 0) -> bytes:
    """Full IPv4 datagram carrying ``seg``."""
    src, dst = as_addr(src), as_addr(dst)
    return serialize_ipv4(
        Ipv4Packet(src, dst, IpProto.TCP, serialize_tcp(seg, src, dst), ttl=ttl,
                   identification=ident, flags=0b010)
    )


def udp_packet(src: Address, dst: Address, dgram: UdpDatagram, ttl: int = 64, ident: int = 0) -> bytes:
    src, dst = as_addr(src), as_addr(dst)
    return serialize_ipv4(
        Ipv4Packet(src, dst, IpProto.UDP, serialize_udp(dgram, src, dst), ttl=ttl,
                   identification=ident, flags=0b010)
    )


__all__ = [
    "Address", "BadChecksum", "FieldOverflow", "FlowKey", "IpProto", "Ipv4Packet",
    "MalformedPacket", "PacketError", "TcpFlags", "TcpSegment", "TruncatedPacket",
    "TruncatedSegment", "UdpDatagram", "UnsupportedProtocol", "UnsupportedVersion",
    "as_addr", "flow_key_of", "mss_option", "parse_ipv4", "parse_options", "parse_tcp",
    "parse_udp", "seq_add", "seq_diff", "seq_leq", "seq_lt", "serialize_ipv4",
    "serialize_tcp", "serialize_udp", "tcp_packet", "udp_packet",
]
