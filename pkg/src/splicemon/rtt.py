"""Connection-establishment RTT measurement.

The direct meter brackets only the establishment call with monotonic
nanosecond timestamps. The coarse baseline reproduces three common
accuracy losses on purpose: setup work inside the timed window, a start
timestamp taken before that work, and millisecond timestamp resolution.
"""

from __future__ import annotations

import csv
import errno
import socket
import statistics
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, TextIO

from .clock import NS_PER_MS, NS_PER_S, ClockRegression, MonotonicClock
from .packet import FlowKey, IpProto, as_addr
from .records import UNKNOWN, AppId, Outcome, RttSample

DEFAULT_TIMEOUT_NS = 3 * NS_PER_S

_REFUSED = {errno.ECONNREFUSED, errno.ECONNRESET}
_UNREACHABLE = {errno.EHOSTUNREACH, errno.ENETUNREACH, errno.EHOSTDOWN, errno.ENETDOWN, errno.EACCES, errno.EPERM}
_TIMEOUT = {errno.EAGAIN, errno.ETIMEDOUT, errno.EINPROGRESS, errno.EALREADY}


def outcome_for_errno(err: int) -> Outcome:
    """Normalize a connect() errno into an :class:`Outcome`.

    Local failures (no ports, no descriptors) surface as UNREACHABLE; the
    caller records the errno as the reason.
    """
    if err == 0:
        return Outcome.SUCCESS
    if err in _REFUSED:
        return Outcome.REFUSED
    if err in _TIMEOUT:
        return Outcome.TIMEOUT
    return Outcome.UNREACHABLE


def round_display(rtt_ns: int) -> float:
    """Nearest half millisecond, ties rounded up (e.g. 4.135 ms -> 4.0)."""
    if rtt_ns < 0:
        raise ValueError("rtt must be nonnegative")
    halves = (int(rtt_ns) * 2 + 500_000) // 1_000_000
    return halves / 2


def bracket(now: Callable[[], int], establish: Callable[[], int]) -> tuple[int, int, int]:
    """Run ``establish`` between two clock reads; nothing else is timed."""
    t_start = now()
    result = establish()
    t_end = now()
    if t_end < t_start:
        raise ClockRegression(f"clock moved from {t_start} to {t_end}")
    return t_start, result, t_end


@dataclass(frozen=True)
class Attempt:
    t_start: int
    t_end: int
    outcome: Outcome
    reason: str = ""


class Probe(Protocol):
    """Something that can perform one timed connection attempt."""

    def now_ns(self) -> int: ...

    def attempt(self, dst: tuple[str, int], timeout_ns: int) -> Attempt: ...

    def work(self, duration_ns: int) -> None: ...


class SocketProbe:
    """Blocking system connect; the socket is prepared before timing starts."""

    def __init__(self, clock=None, source: str | None = None):
        self.clock = clock or MonotonicClock()
        self.source = source

    def now_ns(self) -> int:
        return self.clock.now_ns()

    def prepare(self, timeout_ns: int) -> socket.socket:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(timeout_ns / NS_PER_S)
        if self.source:
            sock.bind((self.source, 0))
        return sock

    def attempt(self, dst: tuple[str, int], timeout_ns: int) -> Attempt:
        sock = self.prepare(timeout_ns)
        addr = (str(dst[0]), int(dst[1]))
        try:
            t_start, err, t_end = bracket(self.clock.now_ns, lambda: sock.connect_ex(addr))
        finally:
            sock.close()
        outcome = outcome_for_errno(err)
        return Attempt(t_start, t_end, outcome, "" if err == 0 else errno.errorcode.get(err, str(err)))

    def work(self, duration_ns: int) -> None:
        # Busy wait: the point is to occupy the timed window like real setup code.
        end = self.clock.now_ns() + duration_ns
        while self.clock.now_ns() < end:
            pass


def time_connect(
    dst: tuple[str, int],
    timeout_ns: int = DEFAULT_TIMEOUT_NS,
    probe: Probe | None = None,
    app: AppId = UNKNOWN,
    network_tag: str = "unlabeled",
    wall: Callable[[], float] | None = None,
) -> RttSample:
    """One direct-meter sample toward ``dst``."""
    probe = probe or SocketProbe()
    att = probe.attempt(dst, timeout_ns)
    return _sample(dst, att, app, network_tag, wall)


def baseline_coarse_connect(
    dst: tuple[str, int],
    timeout_ns: int = DEFAULT_TIMEOUT_NS,
    probe: Probe | None = None,
    pre_connect_ns: int = 12 * NS_PER_MS,
    app: AppId = UNKNOWN,
    network_tag: str = "unlabeled",
    wall: Callable[[], float] | None = None,
) -> RttSample:
    """Degraded meter: ms timestamps around pre-connect work plus the connect."""
    probe = probe or SocketProbe()
    t_start_ms = probe.now_ns() // NS_PER_MS
    probe.work(pre_connect_ns)
    att = probe.attempt(dst, timeout_ns)
    t_end_ms = probe.now_ns() // NS_PER_MS
    coarse = Attempt(t_start_ms * NS_PER_MS, t_end_ms * NS_PER_MS, att.outcome, att.reason)
    return _sample(dst, coarse, app, network_tag, wall)


def _sample(dst, att: Attempt, app, network_tag, wall) -> RttSample:
    key = FlowKey(IpProto.TCP, as_addr("0.0.0.0"), 0, as_addr(dst[0]), int(dst[1]))
    return RttSample(key, app, att.t_start, att.t_end, att.outcome, network_tag,
                     wall() if wall else 0.0, att.reason)


# -- accuracy comparison ---------------------------------------------------------------


@dataclass(frozen=True)
class Target:
    label: str
    addr: str
    port: int

    @property
    def destination(self) -> str:
        return f"{self.label} ({self.addr}:{self.port})"


@dataclass(frozen=True)
class ComparisonRow:
    destination: str
    reference_ms: float
    meter_ms: float
    runs: int
    per_run: tuple[tuple[float, float], ...] = field(default=(), compare=False)

    @property
    def delta_ms(self) -> float:
        return abs(self.meter_ms - self.reference_ms)

    def run_deltas(self) -> list[float]:
        return [abs(m - r) for r, m in self.per_run]


def compare_accuracy(
    targets: Iterable[Target],
    measure: Callable[[Target], tuple[int, int]],
    runs: int = 10,
) -> list[ComparisonRow]:
    """Mean reference vs mean meter value per target.

    ``measure`` performs one run and returns ``(reference_ns, meter_ns)``.
    """
    if runs < 1:
        raise ValueError("runs must be at least 1")
    rows = []
    for t in targets:
        pairs = []
        for _ in range(runs):
            ref, meter = measure(t)
            pairs.append((ref / NS_PER_MS, meter / NS_PER_MS))
        rows.append(ComparisonRow(
            t.destination,
            statistics.fmean(p[0] for p in pairs),
            statistics.fmean(p[1] for p in pairs),
            runs,
            tuple(pairs),
        ))
    return rows


COLUMNS = ("destination", "reference_ms", "meter_ms", "delta_ms", "runs")


def _row_values(r: ComparisonRow) -> tuple:
    return (r.destination, f"{r.reference_ms:.3f}", f"{r.meter_ms:.3f}", f"{r.delta_ms:.3f}", r.runs)


def write_comparison_csv(rows: Iterable[ComparisonRow], fh: TextIO) -> None:
    w = csv.writer(fh)
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow(_row_values(r))


def format_comparison(rows: Iterable[ComparisonRow]) -> str:
    cells = [COLUMNS] + [tuple(str(v) for v in _row_values(r)) for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(COLUMNS))]
    out = []
    for n, c in enumerate(cells):
        out.append("  ".join(v.rjust(w) if i else v.ljust(w) for i, (v, w) in enumerate(zip(c, widths))).rstrip())
        if n == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out)
