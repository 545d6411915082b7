"""Live flow registry and per-flow application attribution."""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterator, Protocol

from .packet import FlowKey
from .records import UNKNOWN, AppId

log = logging.getLogger(__name__)


class DuplicateFlow(KeyError):
    pass


class PlatformUnsupported(RuntimeError):
    pass


class AttributionResolver(Protocol):
    def resolve(self, key: FlowKey) -> AppId | None: ...


class NullResolver:
    def resolve(self, key: FlowKey) -> AppId | None:
        return None


class MapResolver:
    """Static attribution from a port or flow-key map.

    Keys are either a source port (``"43512"``) or a full flow key string as
    produced by ``str(FlowKey)``. Full keys win over ports.
    """

    def __init__(self, mapping: dict[str, str] | None = None):
        self.by_key: dict[str, AppId] = {}
        self.by_port: dict[int, AppId] = {}
        for k, name in (mapping or {}).items():
            k = str(k)
            if k.isdigit():
                self.by_port[int(k)] = AppId(name)
            else:
                self.by_key[k] = AppId(name)

    @classmethod
    def from_file(cls, path: str | Path) -> "MapResolver":
        return cls(json.loads(Path(path).read_text()))

    def resolve(self, key: FlowKey) -> AppId | None:
        hit = self.by_key.get(str(key))
        if hit is None:
            hit = self.by_port.get(key.src_port)
        return hit


class PlatformResolver:
    """Maps a flow's local endpoint to its owning process via the OS connection table.

    Best effort: the owner table can lag the connect, so a miss is retried
    once after ``retry_delay``.
    """

    def __init__(self, retry_delay: float = 0.010):
        import psutil

        self._psutil = psutil
        self.retry_delay = retry_delay
        try:
            psutil.net_connections(kind="inet4")
        except (psutil.AccessDenied, NotImplementedError, OSError) as exc:
            raise PlatformUnsupported(str(exc)) from exc

    def _lookup(self, key: FlowKey) -> AppId | None:
        psutil = self._psutil
        kind = "tcp4" if key.protocol == 6 else "udp4"
        src = str(key.src_addr)
        candidates = []
        for c in psutil.net_connections(kind=kind):
            if not c.laddr or c.pid is None:
                continue
            if c.laddr.port != key.src_port or c.laddr.ip not in (src, "0.0.0.0"):
                continue
            exact_remote = bool(c.raddr) and c.raddr.ip == str(key.dst_addr) and c.raddr.port == key.dst_port
            candidates.append((not exact_remote, c.laddr.ip != src, c.pid))
        for _, _, pid in sorted(candidates):
            try:
                return AppId(psutil.Process(pid).name(), pid)
            except (psutil.NoSuchProcess, psutil.AccessDenied):
                continue
        return None

    def resolve(self, key: FlowKey) -> AppId | None:
        hit = self._lookup(key)
        if hit is None and self.retry_delay:
            time.sleep(self.retry_delay)
            hit = self._lookup(key)
        return hit


def platform_resolver(retry_delay: float = 0.010) -> AttributionResolver:
    try:
        return PlatformResolver(retry_delay)
    except (PlatformUnsupported, ImportError) as exc:
        log.warning("platform attribution unavailable: %s", exc)
        return NullResolver()


@dataclass
class FlowRecord:
    key: FlowKey
    app: AppId
    created_ns: int
    deadline_ns: int | None = None
    entry: Any = None


class FlowRegistry:
    """Registry of live flows keyed by app-side orientation.

    Lookups accept either direction of a flow's key.
    """

    def __init__(self, resolver: AttributionResolver | None = None,
                 on_expire: Callable[[FlowRecord], None] | None = None):
        self.resolver = resolver or NullResolver()
        self.on_expire = on_expire
        self._flows: dict[FlowKey, FlowRecord] = {}
        self._lock = threading.RLock()

    def __len__(self) -> int:
        with self._lock:
            return len(self._flows)

    def __contains__(self, key: FlowKey) -> bool:
        return self.lookup(key) is not None

    def _find(self, key: FlowKey) -> FlowRecord | None:
        rec = self._flows.get(key)
        if rec is None:
            rec = self._flows.get(key.reversed())
        return rec

    def register_flow(self, key: FlowKey, resolver: AttributionResolver | None = None,
                      now_ns: int = 0, entry: Any = None, deadline_ns: int | None = None) -> AppId:
        # Resolve outside the lock: the platform resolver may sleep.
        resolver = resolver or self.resolver
        with self._lock:
            if self._find(key) is not None:
                raise DuplicateFlow(str(key))
        try:
            app = resolver.resolve(key) or UNKNOWN
        except Exception:
            log.exception("resolver failed for %s", key)
            app = UNKNOWN
        with self._lock:
            if self._find(key) is not None:
                raise DuplicateFlow(str(key))
            self._flows[key] = FlowRecord(key, app, now_ns, deadline_ns, entry)
        return app

    def lookup(self, key: FlowKey) -> FlowRecord | None:
        with self._lock:
            return self._find(key)

    def set_deadline(self, key: FlowKey, deadline_ns: int | None) -> None:
        with self._lock:
            rec = self._find(key)
            if rec is not None:
                rec.deadline_ns = deadline_ns

    def remove(self, key: FlowKey) -> FlowRecord | None:
        with self._lock:
            rec = self._find(key)
            if rec is not None:
                del self._flows[rec.key]
            return rec

    def records(self) -> list[FlowRecord]:
        with self._lock:
            return list(self._flows.values())

    def __iter__(self) -> Iterator[FlowRecord]:
        return iter(self.records())

    def expire_flows(self, now_ns: int) -> int:
        """Remove flows whose deadline is at or before ``now_ns``."""
        with self._lock:
            gone = [r for r in self._flows.values() if r.deadline_ns is not None and r.deadline_ns <= now_ns]
            for r in gone:
                del self._flows[r.key]
        if self.on_expire:
            for r in gone:
                self.on_expire(r)
        return len(gone)

