"""Packet channels: a tunnel device, capture files, and in-memory pairs.

Every channel moves whole IPv4 datagrams. ``read_packet`` blocks up to a
deadline and returns ``None`` when it passes.
"""

from __future__ import annotations

import errno
import fcntl
import logging
import os
import queue
import select
import socket
import struct
import threading
from collections import deque
from dataclasses import dataclass
from ipaddress import IPv4Address, IPv4Interface
from pathlib import Path
from typing import BinaryIO, Callable, Iterable, Iterator

from .packet import FlowKey, IpProto, PacketError, TcpFlags, flow_key_of, parse_ipv4

log = logging.getLogger(__name__)

DEFAULT_MTU = 1500


class ChannelClosed(OSError):
    pass


class OversizePacket(ValueError):
    pass


class TunError(OSError):
    pass


class PermissionDenied(TunError):
    pass


class Unsupported(TunError):
    pass


class DeviceBusy(TunError):
    pass


class CaptureError(ValueError):
    pass


class BadMagic(CaptureError):
    pass


class TruncatedRecord(CaptureError):
    pass


class PacketChannel:
    """Base for packet channels."""

    mtu: int = DEFAULT_MTU

    def read_packet(self, timeout: float | None = None) -> bytes | None:
        raise NotImplementedError

    def write_packet(self, data: bytes) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def _check_size(self, data: bytes) -> None:
        if len(data) > self.mtu:
            raise OversizePacket(f"{len(data)} bytes exceeds mtu {self.mtu}")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# -- tunnel device ------------------------------------------------------------------

TUNSETIFF = 0x400454CA
IFF_TUN = 0x0001
IFF_NO_PI = 0x1000
SIOCGIFFLAGS = 0x8913
SIOCSIFFLAGS = 0x8914
SIOCSIFADDR = 0x8916
SIOCSIFNETMASK = 0x891C
SIOCSIFMTU = 0x8922
IFF_UP = 0x1
IFF_RUNNING = 0x40


def _ifreq_addr(name: bytes, addr: IPv4Address) -> bytes:
    return struct.pack("16sH2s4s8s", name, socket.AF_INET, b"\x00\x00", addr.packed, b"\x00" * 8)


class TunChannel(PacketChannel):
    """Linux TUN device in IFF_TUN | IFF_NO_PI mode."""

    def __init__(self, fd: int, name: str, mtu: int):
        self.fd = fd
        self.name = name
        self.mtu = mtu
        self._closed = False

    @classmethod
    def open(cls, name: str = "splice0", mtu: int = DEFAULT_MTU, address: str | None = None) -> "TunChannel":
        """Create ``name`` and optionally bring it up with ``address`` (CIDR)."""
        if len(name.encode()) > 15:
            raise ValueError("interface name longer than 15 bytes")
        try:
            fd = os.open("/dev/net/tun", os.O_RDWR | os.O_NONBLOCK)
        except FileNotFoundError as exc:
            raise Unsupported("no /dev/net/tun on this host") from exc
        except PermissionError as exc:
            raise PermissionDenied(
                "opening /dev/net/tun needs CAP_NET_ADMIN; grant that capability "
                "(e.g. setcap cap_net_admin+ep on the interpreter) rather than running everything as root"
            ) from exc
        try:
            fcntl.ioctl(fd, TUNSETIFF, struct.pack("16sH", name.encode(), IFF_TUN | IFF_NO_PI))
            chan = cls(fd, name, mtu)
            chan._configure(address)
        except OSError as exc:
            os.close(fd)
            if exc.errno == errno.EBUSY:
                raise DeviceBusy(f"tunnel {name} is already open") from exc
            if exc.errno == errno.EPERM:
                raise PermissionDenied("creating a tunnel needs CAP_NET_ADMIN") from exc
            raise TunError(exc.errno, f"tunnel setup failed: {exc.strerror}") from exc
        return chan

    def _configure(self, address: str | None) -> None:
        bname = self.name.encode()
        with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
            fcntl.ioctl(s, SIOCSIFMTU, struct.pack("16si12s", bname, self.mtu, b""))
            if address is not None:
                iface = IPv4Interface(address)
                fcntl.ioctl(s, SIOCSIFADDR, _ifreq_addr(bname, iface.ip))
                fcntl.ioctl(s, SIOCSIFNETMASK, _ifreq_addr(bname, iface.netmask))
            flags = struct.unpack("16sH", fcntl.ioctl(s, SIOCGIFFLAGS, struct.pack("16sH14s", bname, 0, b""))[:18])[1]
            fcntl.ioctl(s, SIOCSIFFLAGS, struct.pack("16sH14s", bname, flags | IFF_UP | IFF_RUNNING, b""))

    def fileno(self) -> int:
        return self.fd

    def read_packet(self, timeout: float | None = None) -> bytes | None:
        if self._closed:
            raise ChannelClosed("tunnel closed")
        while True:
            try:
                return os.read(self.fd, self.mtu + 64)
            except BlockingIOError:
                pass
            ready, _, _ = select.select([self.fd], [], [], timeout)
            if not ready:
                return None
            if self._closed:
                raise ChannelClosed("tunnel closed")

    def write_packet(self, data: bytes) -> None:
        if self._closed:
            raise ChannelClosed("tunnel closed")
        self._check_size(data)
        os.write(self.fd, data)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            os.close(self.fd)


def open_tunnel(name: str = "splice0", mtu: int = DEFAULT_MTU, address: str | None = None) -> TunChannel:
    return TunChannel.open(name, mtu, address)


# -- capture files ---------------------------------------------------------------------

MAGIC_US = 0xA1B2C3D4
MAGIC_NS = 0xA1B23C4D

LINKTYPE_NULL = 0
LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_LINUX_SLL = 113
LINKTYPE_IPV4 = 228


@dataclass(frozen=True)
class CaptureRecord:
    ts_ns: int
    data: bytes
    orig_len: int


def _strip_link(link_type: int, frame: bytes) -> bytes | None:
    """IPv4 datagram inside a link-layer frame, or None for other protocols."""
    if link_type in (LINKTYPE_RAW, LINKTYPE_IPV4, 12, 14):
        ip = frame
    elif link_type == LINKTYPE_ETHERNET:
        off, ethertype = 12, None
        while len(frame) >= off + 2:
            ethertype = struct.unpack_from("!H", frame, off)[0]
            if ethertype in (0x8100, 0x88A8):  # VLAN tags
                off += 4
                continue
            break
        if ethertype != 0x0800:
            return None
        ip = frame[off + 2 :]
    elif link_type == LINKTYPE_NULL:
        if len(frame) < 4:
            return None
        fam_le, fam_be = struct.unpack_from("<I", frame)[0], struct.unpack_from(">I", frame)[0]
        if socket.AF_INET not in (fam_le, fam_be):
            return None
        ip = frame[4:]
    elif link_type == LINKTYPE_LINUX_SLL:
        if len(frame) < 16 or struct.unpack_from("!H", frame, 14)[0] != 0x0800:
            return None
        ip = frame[16:]
    else:
        raise CaptureError(f"unsupported link type {link_type}")
    return ip if ip[:1] and ip[0] >> 4 == 4 else None


class CaptureReader:
    """Classic capture-file reader yielding IPv4 datagrams.

    Timestamps are nanoseconds relative to ``time_base`` (the first record's
    timestamp unless given). A record timestamped earlier than its
    predecessor is clamped so the sequence is nondecreasing. A truncated
    trailing record ends iteration and is counted in ``truncated``.
    """

    def __init__(self, path: str | Path, time_base: int | None = None):
        self.path = Path(path)
        self._fh: BinaryIO = open(self.path, "rb")
        header = self._fh.read(24)
        if len(header) < 24:
            self._fh.close()
            raise BadMagic("file shorter than a capture header")
        for endian in ("<", ">"):
            magic = struct.unpack(endian + "I", header[:4])[0]
            if magic in (MAGIC_US, MAGIC_NS):
                break
        else:
            self._fh.close()
            raise BadMagic(f"unrecognized magic {header[:4].hex()}")
        self.endian = endian
        self.nanosecond = magic == MAGIC_NS
        _, self.version_major, self.version_minor, _, _, self.snaplen, self.link_type = struct.unpack(
            endian + "IHHiIII", header
        )
        self.link_type &= 0x0FFFFFFF
        self.time_base = time_base
        self.truncated = 0
        self.skipped = 0
        self.clamped = 0

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def frames(self) -> Iterator[tuple[int, bytes, int]]:
        """Raw ``(absolute_ts_ns, frame, orig_len)`` tuples."""
        hdr_fmt = self.endian + "IIII"
        while True:
            hdr = self._fh.read(16)
            if not hdr:
                return
            if len(hdr) < 16:
                self.truncated += 1
                return
            sec, frac, incl, orig = struct.unpack(hdr_fmt, hdr)
            frame = self._fh.read(incl)
            if len(frame) < incl:
                self.truncated += 1
                return
            ts = sec * 1_000_000_000 + (frac if self.nanosecond else frac * 1000)
            yield ts, frame, orig

    def __iter__(self) -> Iterator[CaptureRecord]:
        last = None
        for ts, frame, orig in self.frames():
            ip = _strip_link(self.link_type, frame)
            if ip is None:
                self.skipped += 1
                continue
            if self.time_base is None:
                self.time_base = ts
            rel = ts - self.time_base
            if last is not None and rel < last:
                self.clamped += 1
                rel = last
            last = rel
            yield CaptureRecord(rel, ip, orig)

    def next_record(self) -> tuple[int, bytes] | None:
        if not hasattr(self, "_iter"):
            self._iter = iter(self)
        rec = next(self._iter, None)
        return None if rec is None else (rec.ts_ns, rec.data)


def open_capture(path: str | Path, time_base: int | None = None) -> CaptureReader:
    return CaptureReader(path, time_base)


class CaptureWriter:
    """Classic capture writer; raw IPv4 link type, nanosecond or microsecond stamps."""

    def __init__(self, path: str | Path, link_type: int = LINKTYPE_RAW, nanosecond: bool = True,
                 snaplen: int = 65535, big_endian: bool = False):
        self._fh = open(path, "wb")
        self.e = ">" if big_endian else "<"
        self.nanosecond = nanosecond
        self.link_type = link_type
        magic = MAGIC_NS if nanosecond else MAGIC_US
        self._fh.write(struct.pack(self.e + "IHHiIII", magic, 2, 4, 0, 0, snaplen, link_type))
        self._lock = threading.Lock()

    def write(self, ts_ns: int, frame: bytes) -> None:
        sec, rem = divmod(ts_ns, 1_000_000_000)
        frac = rem if self.nanosecond else rem // 1000
        with self._lock:
            self._fh.write(struct.pack(self.e + "IIII", sec, frac, len(frame), len(frame)) + frame)

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def pair_handshakes(records: Iterable[CaptureRecord | tuple[int, bytes]]) -> dict[FlowKey, tuple[int, int]]:
    """Map each client-side flow key to its (first SYN, first SYN-ACK) timestamps.

    Flows whose SYN-ACK never appears are omitted.
    """
    syn_at: dict[FlowKey, int] = {}
    out: dict[FlowKey, tuple[int, int]] = {}
    for rec in records:
        ts, data = (rec.ts_ns, rec.data) if isinstance(rec, CaptureRecord) else rec
        try:
            pkt = parse_ipv4(data)
            if pkt.protocol != IpProto.TCP or len(pkt.payload) < 14:
                continue
            key = flow_key_of(pkt)
        except PacketError:
            continue
        flags = pkt.payload[13]
        if flags & TcpFlags.SYN and not flags & TcpFlags.ACK:
            syn_at.setdefault(key, ts)
        elif flags & TcpFlags.SYN and flags & TcpFlags.ACK:
            client = key.reversed()
            if client in syn_at and client not in out:
                out[client] = (syn_at[client], ts)
    return out


# -- in-memory channels ---------------------------------------------------------------


class MemoryChannel(PacketChannel):
    """Thread-safe in-memory channel end; use :func:`memory_pair`."""

    def __init__(self, mtu: int = DEFAULT_MTU):
        self.mtu = mtu
        self._inbox: queue.Queue = queue.Queue()
        self.peer: MemoryChannel | None = None
        self.closed = False

    def read_packet(self, timeout: float | None = None) -> bytes | None:
        if self.closed:
            raise ChannelClosed("channel closed")
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            return None
        if item is None:
            self.closed = True
            raise ChannelClosed("peer closed")
        return item

    def write_packet(self, data: bytes) -> None:
        if self.closed or self.peer is None or self.peer.closed:
            raise ChannelClosed("channel closed")
        self._check_size(data)
        self.peer._inbox.put(bytes(data))

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            if self.peer is not None:
                self.peer._inbox.put(None)
            self._inbox.put(None)


def memory_pair(mtu: int = DEFAULT_MTU) -> tuple[MemoryChannel, MemoryChannel]:
    a, b = MemoryChannel(mtu), MemoryChannel(mtu)
    a.peer, b.peer = b, a
    return a, b


class SimChannel(PacketChannel):
    """One end of a linked pair on a :class:`~splicemon.clock.SimLoop`.

    A packet written at virtual time t is delivered to the peer at
    t + ``delay_ns``; delivery order equals write order. If the receiving
    end has a ``receiver`` callback it is invoked on delivery, otherwise the
    packet waits in the inbox for :meth:`read_packet`.
    """

    def __init__(self, loop, delay_ns: int = 0, mtu: int = DEFAULT_MTU):
        self.loop = loop
        self.delay_ns = delay_ns
        self.mtu = mtu
        self.peer: SimChannel | None = None
        self.inbox: deque[bytes] = deque()
        self.receiver: Callable[[bytes], None] | None = None
        self.closed = False
        self.written = 0
        self._last_due = 0

    def set_receiver(self, fn: Callable[[bytes], None] | None) -> None:
        self.receiver = fn
        while fn is not None and self.inbox:
            fn(self.inbox.popleft())

    def _deliver(self, data: bytes) -> None:
        if self.closed:
            return
        if self.receiver is not None:
            self.receiver(data)
        else:
            self.inbox.append(data)

    def write_packet(self, data: bytes) -> None:
        if self.closed or self.peer is None or self.peer.closed:
            raise ChannelClosed("channel closed")
        self._check_size(data)
        self.written += 1
        # Keep FIFO even if delay_ns is changed between writes.
        due = max(self.loop.now_ns() + self.delay_ns, self._last_due)
        self._last_due = due
        self.loop.call_at(due, self.peer._deliver, bytes(data))

    def read_packet(self, timeout: float | None = None) -> bytes | None:
        """Run the loop until a packet arrives or ``timeout`` virtual seconds pass."""
        if self.closed:
            raise ChannelClosed("channel closed")
        deadline = None if timeout is None else self.loop.now_ns() + int(timeout * 1e9)
        if not self.loop.run_until(lambda: bool(self.inbox), deadline):
            if deadline is not None and deadline > self.loop.now_ns():
                self.loop.clock.advance_to(deadline)
            return None
        return self.inbox.popleft()

    def close(self) -> None:
        self.closed = True


def sim_channel(loop, delay_ns: int | tuple[int, int] = 0, mtu: int = DEFAULT_MTU) -> tuple[SimChannel, SimChannel]:
    """Linked pair; ``delay_ns`` is one value or (a->b, b->a)."""
    ab, ba = (delay_ns, delay_ns) if isinstance(delay_ns, int) else delay_ns
    a, b = SimChannel(loop, ab, mtu), SimChannel(loop, ba, mtu)
    a.peer, b.peer = b, a
    return a, b
