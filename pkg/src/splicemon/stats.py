"""Per-app aggregates over measured samples and failures, with a JSONL event log."""

from __future__ import annotations

import csv
import enum
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, TextIO, Union

from .records import AppId, FailureClass, FailureRecord, Outcome, RttSample
from .rtt import round_display

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class UnknownApp(KeyError):
    pass


class NoData(ValueError):
    pass


class CorruptRecord(ValueError):
    pass


class IoFailure(OSError):
    pass


class EventKind(enum.Enum):
    SAMPLE = "SAMPLE"
    FAILURE = "FAILURE"


Event = Union[RttSample, FailureRecord]


@dataclass(frozen=True)
class EventLogRecord:
    kind: EventKind
    payload: Event
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def wrap(cls, item: Event) -> "EventLogRecord":
        kind = EventKind.SAMPLE if isinstance(item, RttSample) else EventKind.FAILURE
        return cls(kind, item)

    def to_json(self) -> str:
        return json.dumps(
            {"schema_version": self.schema_version, "kind": self.kind.value, "payload": self.payload.as_dict()},
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "EventLogRecord":
        try:
            d = json.loads(line)
            kind = EventKind(d["kind"])
            parse = RttSample.from_dict if kind is EventKind.SAMPLE else FailureRecord.from_dict
            return cls(kind, parse(d["payload"]), int(d.get("schema_version", SCHEMA_VERSION)))
        except (ValueError, KeyError, TypeError) as exc:
            raise CorruptRecord(str(exc)) from exc


@dataclass
class RttAggregate:
    """Exact integer aggregate of successful RTTs."""

    count: int = 0
    min_ns: int | None = None
    max_ns: int | None = None
    sum_ns: int = 0

    def add(self, rtt_ns: int) -> None:
        self.count += 1
        self.sum_ns += rtt_ns
        self.min_ns = rtt_ns if self.min_ns is None else min(self.min_ns, rtt_ns)
        self.max_ns = rtt_ns if self.max_ns is None else max(self.max_ns, rtt_ns)

    @property
    def mean_ns(self) -> int | None:
        if not self.count:
            return None
        return (2 * self.sum_ns + self.count) // (2 * self.count)


@dataclass
class DestinationStats(RttAggregate):
    failures: dict[FailureClass, int] = field(default_factory=dict)


@dataclass
class AppStats:
    app: AppId
    conn_count: int = 0
    rtt: RttAggregate = field(default_factory=RttAggregate)
    failures: dict[FailureClass, int] = field(default_factory=dict)
    dns_misconfig: int = 0
    per_destination: dict[str, DestinationStats] = field(default_factory=dict)

    @property
    def success_count(self) -> int:
        return self.rtt.count

    @property
    def min_ns(self) -> int | None:
        return self.rtt.min_ns

    @property
    def max_ns(self) -> int | None:
        return self.rtt.max_ns

    @property
    def mean_ns(self) -> int | None:
        return self.rtt.mean_ns

    def copy(self) -> "AppStats":
        return AppStats(
            self.app,
            self.conn_count,
            RttAggregate(**vars(self.rtt)),
            dict(self.failures),
            self.dns_misconfig,
            {k: DestinationStats(v.count, v.min_ns, v.max_ns, v.sum_ns, dict(v.failures))
             for k, v in self.per_destination.items()},
        )

    def display(self) -> dict:
        """Rounded presentation row."""
        show = lambda ns: None if ns is None else round_display(ns)  # noqa: E731
        return {
            "app": self.app.name,
            "conn_count": self.conn_count,
            "success_count": self.success_count,
            "min_ms": show(self.min_ns),
            "max_ms": show(self.max_ns),
            "mean_ms": show(self.mean_ns),
            "failures": sum(self.failures.values()),
            "dns_misconfig": self.dns_misconfig,
        }


class StatsStore:
    """Thread-safe accumulator. Views return snapshots.

    With ``log_path`` set every recorded event is appended to that JSONL file
    as it arrives, so a later session can pick up where this one stopped.
    """

    def __init__(self, log_path: str | Path | None = None):
        self._lock = threading.Lock()
        self._apps: dict[str, AppStats] = {}
        self._events: list[EventLogRecord] = []
        self._log: TextIO | None = None
        self.corrupt_records = 0
        if log_path is not None:
            self.attach(log_path)

    # -- recording ----------------------------------------------------------------

    def _apply(self, ev: EventLogRecord) -> AppStats:
        item = ev.payload
        stats = self._apps.get(item.app.name)
        if stats is None:
            stats = self._apps[item.app.name] = AppStats(item.app)
        dest = str(item.key.dst_addr)
        if ev.kind is EventKind.SAMPLE:
            # Failed attempts arrive again as FailureRecords; only successes carry an RTT.
            if item.outcome is Outcome.SUCCESS:
                stats.conn_count += 1
                stats.rtt.add(item.rtt_ns)
                stats.per_destination.setdefault(dest, DestinationStats()).add(item.rtt_ns)
        elif item.is_connection_failure:
            stats.conn_count += 1
            stats.failures[item.cls] = stats.failures.get(item.cls, 0) + 1
            d = stats.per_destination.setdefault(dest, DestinationStats())
            d.failures[item.cls] = d.failures.get(item.cls, 0) + 1
        else:
            stats.dns_misconfig += 1
        return stats

    def record(self, item: Event) -> AppStats:
        ev = EventLogRecord.wrap(item)
        with self._lock:
            stats = self._apply(ev)
            self._events.append(ev)
            if self._log is not None:
                self._log.write(ev.to_json() + "\n")
                self._log.flush()
            return stats.copy()

    def record_many(self, items: Iterable[Event]) -> None:
        for item in items:
            self.record(item)

    # -- views --------------------------------------------------------------------

    @property
    def events(self) -> list[EventLogRecord]:
        with self._lock:
            return list(self._events)

    def samples(self, app: AppId | str | None = None, network_tag: str | None = None) -> list[RttSample]:
        name = app.name if isinstance(app, AppId) else app
        return [
            e.payload
            for e in self.events
            if e.kind is EventKind.SAMPLE
            and e.payload.outcome is Outcome.SUCCESS
            and (name is None or e.payload.app.name == name)
            and (network_tag is None or e.payload.network_tag == network_tag)
        ]

    def all_app_view(self) -> list[AppStats]:
        with self._lock:
            view = [s.copy() for s in self._apps.values()]
        return sorted(view, key=lambda s: (-s.conn_count, s.app.name))

    def app_view(self, app: AppId | str) -> AppStats:
        name = app.name if isinstance(app, AppId) else app
        with self._lock:
            if name not in self._apps:
                raise UnknownApp(name)
            return self._apps[name].copy()

    def export_cdf(self, app: AppId | str | None = None, network_tag: str | None = None) -> list[tuple[float, float]]:
        """Empirical CDF points ``(rtt_ms, fraction <= rtt)`` of successful samples."""
        values = sorted(s.rtt_ns for s in self.samples(app, network_tag))
        if not values:
            raise NoData(f"no samples for app={app} tag={network_tag}")
        n = len(values)
        points = []
        for i, v in enumerate(values, 1):
            if i < n and values[i] == v:
                continue
            points.append((v / 1e6, i / n))
        return points

    # -- persistence --------------------------------------------------------------

    def persist(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        try:
            with open(tmp, "w") as fh:
                for ev in self.events:
                    fh.write(ev.to_json() + "\n")
            os.replace(tmp, path)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    def _read(self, path: Path) -> None:
        try:
            fh = open(path)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        with fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    ev = EventLogRecord.from_json(line)
                except CorruptRecord as exc:
                    self.corrupt_records += 1
                    log.warning("%s:%d: skipping corrupt record (%s)", path, lineno, exc)
                    continue
                self._apply(ev)
                self._events.append(ev)

    @classmethod
    def load(cls, path: str | Path) -> "StatsStore":
        store = cls()
        store._read(Path(path))
        return store

    def attach(self, path: str | Path) -> None:
        """Load an existing log (if any) and append subsequent events to it."""
        path = Path(path)
        with self._lock:
            if path.exists():
                self._read(path)
                self._repair_tail(path)
            try:
                self._log = open(path, "a")
            except OSError as exc:
                raise IoFailure(str(exc)) from exc

    @staticmethod
    def _repair_tail(path: Path) -> None:
        # A torn final line would otherwise swallow the next appended record.
        with open(path, "rb+") as fh:
            fh.seek(0, os.SEEK_END)
            if fh.tell() and (fh.seek(-1, os.SEEK_END), fh.read(1))[1] != b"\n":
                fh.write(b"\n")

    def close(self) -> None:
        with self._lock:
            if self._log is not None:
                self._log.close()
                self._log = None

    def __enter__(self) -> "StatsStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- exports ------------------------------------------------------------------

    def export_csv(self, fh: TextIO) -> None:
        w = csv.writer(fh)
        classes = [c for c in FailureClass if c is not FailureClass.DNS_MISCONFIG]
        w.writerow(["app", "conn_count", "success_count", "min_ns", "max_ns", "mean_ns"]
                   + [c.value.lower() for c in classes] + ["dns_misconfig"])
        for s in self.all_app_view():
            w.writerow([s.app.name, s.conn_count, s.success_count, s.min_ns, s.max_ns, s.mean_ns]
                       + [s.failures.get(c, 0) for c in classes] + [s.dns_misconfig])

    def export_cdf_csv(self, fh: TextIO, app: AppId | str | None = None, network_tag: str | None = None) -> None:
        w = csv.writer(fh)
        w.writerow(["rtt_ms", "fraction"])
        for x, f in self.export_cdf(app, network_tag):
            w.writerow([f"{x:.6f}", f"{f:.6f}"])


def render_all_app(view: list[AppStats]) -> str:
    """Aligned text table for the all-app view."""
    head = ("app", "conns", "ok", "min_ms", "mean_ms", "max_ms", "failed", "dns")
    rows = []
    for s in view:
        d = s.display()
        rows.append((d["app"], d["conn_count"], d["success_count"], d["min_ms"], d["mean_ms"], d["max_ms"],
                     d["failures"], d["dns_misconfig"]))
    return _table(head, rows)


def render_app(stats: AppStats) -> str:
    head = ("destination", "ok", "min_ms", "mean_ms", "max_ms", "failed")
    show = lambda ns: "-" if ns is None else round_display(ns)  # noqa: E731
    rows = [
        (dst, d.count, show(d.min_ns), show(d.mean_ns), show(d.max_ns),
         ",".join(f"{c.value}={n}" for c, n in sorted(d.failures.items(), key=lambda kv: kv[0].value)) or "-")
        for dst, d in sorted(stats.per_destination.items(), key=lambda kv: (-kv[1].count, kv[0]))
    ]
    summary = render_all_app([stats])
    return summary + "\n\n" + _table(head, rows)


def _table(head, rows) -> str:
    cells = [tuple("-" if v is None else str(v) for v in r) for r in [head, *rows]]
    widths = [max(len(r[i]) for r in cells) for i in range(len(head))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
