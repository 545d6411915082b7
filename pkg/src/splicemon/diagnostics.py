"""Failure classification and DNS misconfiguration signatures.

DNS inspection works on a copy of relayed response payloads and never
modifies them. Only A/IN answers are collected.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from ipaddress import IPv4Address
from typing import Iterable

from .packet import FlowKey
from .records import UNKNOWN, AppId, FailureClass, FailureRecord, Outcome

log = logging.getLogger(__name__)

DEFAULT_BOGUS = frozenset({IPv4Address("1.1.1.1")})

TYPE_A = 1
TYPE_CNAME = 5
CLASS_IN = 1
RCODE_NXDOMAIN = 3


class MalformedDns(ValueError):
    pass


@dataclass
class DnsAnswerSummary:
    query_name: str = ""
    answer_addresses: list[IPv4Address] = field(default_factory=list)
    response_code: int = 0
    transaction_id: int = 0
    is_response: bool = False
    malformed: bool = False


def _read_name(msg: bytes, offset: int) -> tuple[str, int]:
    labels = []
    end = None
    seen = set()
    total = 0
    while True:
        if offset >= len(msg):
            raise MalformedDns("name runs past end of message")
        length = msg[offset]
        if length & 0xC0 == 0xC0:
            if offset + 1 >= len(msg):
                raise MalformedDns("truncated compression pointer")
            target = ((length & 0x3F) << 8) | msg[offset + 1]
            if target in seen:
                raise MalformedDns("compression loop")
            seen.add(target)
            if end is None:
                end = offset + 2
            offset = target
            continue
        if length & 0xC0:
            raise MalformedDns(f"reserved label type {length:#x}")
        offset += 1
        if length == 0:
            break
        label = msg[offset : offset + length]
        if len(label) != length:
            raise MalformedDns("truncated label")
        total += length + 1
        if total > 255:
            raise MalformedDns("name longer than 255 bytes")
        labels.append(label.decode("ascii", errors="replace"))
        offset += length
    return ".".join(labels), (end if end is not None else offset)


def parse_dns(payload: bytes) -> DnsAnswerSummary:
    """Strict decode; raises :class:`MalformedDns`."""
    if len(payload) < 12:
        raise MalformedDns("shorter than the 12-byte header")
    qid, flags, qdcount, ancount, _, _ = struct.unpack_from("!HHHHHH", payload)
    out = DnsAnswerSummary(transaction_id=qid, response_code=flags & 0x0F, is_response=bool(flags & 0x8000))
    off = 12
    for i in range(qdcount):
        name, off = _read_name(payload, off)
        if off + 4 > len(payload):
            raise MalformedDns("truncated question")
        off += 4
        if i == 0:
            out.query_name = name
    for _ in range(ancount):
        _, off = _read_name(payload, off)
        if off + 10 > len(payload):
            raise MalformedDns("truncated resource record")
        rtype, rclass, _ttl, rdlen = struct.unpack_from("!HHIH", payload, off)
        off += 10
        if off + rdlen > len(payload):
            raise MalformedDns("rdata runs past end of message")
        if rtype == TYPE_A and rclass == CLASS_IN and rdlen == 4:
            out.answer_addresses.append(IPv4Address(payload[off : off + 4]))
        off += rdlen
    return out


def inspect_dns(payload: bytes) -> DnsAnswerSummary:
    """Tolerant decode: malformed input yields an empty summary flagged ``malformed``."""
    try:
        return parse_dns(bytes(payload))
    except MalformedDns as exc:
        log.debug("malformed DNS payload: %s", exc)
        return DnsAnswerSummary(malformed=True)


def flag_misconfig(
    summary: DnsAnswerSummary,
    bogus: Iterable[IPv4Address] = DEFAULT_BOGUS,
    key: FlowKey | None = None,
    app: AppId = UNKNOWN,
    wall_time: float = 0.0,
    network_tag: str = "unlabeled",
) -> FailureRecord | None:
    """DNS_MISCONFIG record if any answer address is in ``bogus``."""
    bogus = {IPv4Address(a) for a in bogus}
    hits = [a for a in summary.answer_addresses if a in bogus]
    if not hits:
        return None
    if key is None:
        key = FlowKey.make(17, "0.0.0.0", 0, "0.0.0.0", 53)
    evidence = f"domain={summary.query_name} answer={','.join(map(str, hits))}"
    return FailureRecord(key, app, FailureClass.DNS_MISCONFIG, evidence, wall_time, network_tag)


def classify_failure(outcome: Outcome, elapsed_ns: int, timeout_ns: int) -> FailureClass:
    """Failure class for a non-successful connection attempt."""
    if outcome is Outcome.SUCCESS:
        raise ValueError("a successful connection is not a failure")
    if outcome is Outcome.TIMEOUT or elapsed_ns >= timeout_ns:
        return FailureClass.TIMEOUT
    return {
        Outcome.REFUSED: FailureClass.REFUSED,
        Outcome.UNREACHABLE: FailureClass.UNREACHABLE,
        Outcome.CANCELED: FailureClass.CANCELED,
    }[outcome]


# -- message builders (simulated resolver and fixtures) -------------------------------


def _encode_name(name: str, table: dict | None, base: int) -> bytes:
    out = b""
    labels = [lab for lab in name.rstrip(".").split(".") if lab]
    for i in range(len(labels)):
        suffix = ".".join(labels[i:]).lower()
        if table is not None and suffix in table:
            return out + struct.pack("!H", 0xC000 | table[suffix])
        if table is not None and base + len(out) < 0x3FFF:
            table[suffix] = base + len(out)
        lab = labels[i].encode("ascii")
        out += bytes([len(lab)]) + lab
    return out + b"\x00"


def build_query(name: str, qid: int = 0, qtype: int = TYPE_A) -> bytes:
    header = struct.pack("!HHHHHH", qid, 0x0100, 1, 0, 0, 0)
    return header + _encode_name(name, None, 12) + struct.pack("!HH", qtype, CLASS_IN)


def build_response(
    name: str,
    addresses: Iterable = (),
    rcode: int = 0,
    qid: int = 0,
    cname: str | None = None,
    compress: bool = True,
    ttl: int = 60,
) -> bytes:
    """A response to an A query; with ``cname`` the addresses hang off the alias."""
    table: dict | None = {} if compress else None
    msg = bytearray()
    addresses = [IPv4Address(a) for a in addresses]
    ancount = len(addresses) + (1 if cname else 0)
    msg += struct.pack("!HHHHHH", qid, 0x8180 | (rcode & 0x0F), 1, ancount, 0, 0)
    msg += _encode_name(name, table, len(msg))
    msg += struct.pack("!HH", TYPE_A, CLASS_IN)
    owner = name
    if cname:
        msg += _encode_name(name, table, len(msg))
        msg += struct.pack("!HHI", TYPE_CNAME, CLASS_IN, ttl)
        rdata = _encode_name(cname, table, len(msg) + 2)
        msg += struct.pack("!H", len(rdata)) + rdata
        owner = cname
    for addr in addresses:
        msg += _encode_name(owner, table, len(msg))
        msg += struct.pack("!HHIH", TYPE_A, CLASS_IN, ttl, 4) + addr.packed
    return bytes(msg)
