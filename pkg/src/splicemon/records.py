"""Measurement records shared by the meter, diagnostics and the stats store."""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .packet import FlowKey

UNKNOWN_APP = "unknown"


@dataclass(frozen=True, order=True)
class AppId:
    name: str
    numeric_id: int | None = None

    def __post_init__(self):
        if not self.name:
            raise ValueError("app name must be nonempty")

    def __str__(self) -> str:
        return self.name


UNKNOWN = AppId(UNKNOWN_APP)


class Outcome(enum.Enum):
    SUCCESS = "SUCCESS"
    TIMEOUT = "TIMEOUT"
    REFUSED = "REFUSED"
    UNREACHABLE = "UNREACHABLE"
    CANCELED = "CANCELED"


class FailureClass(enum.Enum):
    TIMEOUT = "TIMEOUT"
    REFUSED = "REFUSED"
    UNREACHABLE = "UNREACHABLE"
    CANCELED = "CANCELED"
    DNS_MISCONFIG = "DNS_MISCONFIG"


CONNECTION_FAILURES = (
    FailureClass.TIMEOUT,
    FailureClass.REFUSED,
    FailureClass.UNREACHABLE,
    FailureClass.CANCELED,
)


@dataclass(frozen=True)
class RttSample:
    key: FlowKey
    app: AppId
    t_start: int
    t_end: int
    outcome: Outcome
    network_tag: str = "unlabeled"
    wall_time: float = 0.0
    reason: str = ""

    def __post_init__(self):
        if self.t_end < self.t_start:
            raise ValueError("t_end precedes t_start")

    @property
    def rtt_ns(self) -> int:
        return self.t_end - self.t_start

    @property
    def rtt_ms(self) -> float:
        return self.rtt_ns / 1e6

    def as_dict(self) -> dict:
        return {
            "key": self.key.as_dict(),
            "app": self.app.name,
            "app_id": self.app.numeric_id,
            "t_start": self.t_start,
            "t_end": self.t_end,
            "rtt_ns": self.rtt_ns,
            "outcome": self.outcome.value,
            "network_tag": self.network_tag,
            "wall_time": self.wall_time,
            "reason": self.reason,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RttSample":
        return cls(
            key=FlowKey.from_dict(d["key"]),
            app=AppId(d["app"], d.get("app_id")),
            t_start=int(d["t_start"]),
            t_end=int(d["t_end"]),
            outcome=Outcome(d["outcome"]),
            network_tag=d.get("network_tag", "unlabeled"),
            wall_time=float(d.get("wall_time", 0.0)),
            reason=d.get("reason", ""),
        )


@dataclass(frozen=True)
class FailureRecord:
    key: FlowKey
    app: AppId
    cls: FailureClass
    evidence: str = ""
    wall_time: float = 0.0
    network_tag: str = "unlabeled"

    @property
    def is_connection_failure(self) -> bool:
        return self.cls in CONNECTION_FAILURES

    def as_dict(self) -> dict:
        return {
            "key": self.key.as_dict(),
            "app": self.app.name,
            "app_id": self.app.numeric_id,
            "class": self.cls.value,
            "evidence": self.evidence,
            "network_tag": self.network_tag,
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FailureRecord":
        return cls(
            key=FlowKey.from_dict(d["key"]),
            app=AppId(d["app"], d.get("app_id")),
            cls=FailureClass(d["class"]),
            evidence=d.get("evidence", ""),
            wall_time=float(d.get("wall_time", 0.0)),
            network_tag=d.get("network_tag", "unlabeled"),
        )
