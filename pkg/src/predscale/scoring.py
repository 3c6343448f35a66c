"""Run scoring.

    total = sum_i(succ_i * mean_rt_i**2) / sum_i(succ_i)
            + failed * failed_request_penalty
            + average_replicas * scarcity_factor

The defaults (900 = 30 s squared, factor 1) price a failure like a request
that took half a minute and count each replica-second once.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence


@dataclass(frozen=True)
class PenaltyParams:
    failed_request_penalty: float = 900.0
    scarcity_factor: float = 1.0

    def __post_init__(self):
        if self.failed_request_penalty < 0 or self.scarcity_factor < 0:
            raise ValueError("penalty parameters must be non-negative")


@dataclass(frozen=True)
class ReplicaTimeline:
    """Step function of ready replicas: ``changes[k] = (time, count)`` holds until the next change."""
    changes: tuple[tuple[float, int], ...]
    end: float

    def __post_init__(self):
        if not self.changes:
            raise ValueError("timeline needs at least one point")
        times = [t for t, _ in self.changes]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("timeline times must be strictly increasing")
        if any(n < 1 for _, n in self.changes):
            raise ValueError("replica counts must be >= 1")
        if self.end < times[-1]:
            raise ValueError("timeline end precedes its last change")

    @classmethod
    def constant(cls, replicas: int, end: float, start: float = 0.0) -> "ReplicaTimeline":
        return cls(((start, replicas),), end)

    def value_at(self, t: float) -> int:
        n = self.changes[0][1]
        for tc, c in self.changes:
            if tc > t:
                break
            n = c
        return n

    def to_dict(self) -> dict:
        return {"changes": [list(c) for c in self.changes], "end": self.end}

    @classmethod
    def from_dict(cls, d: dict) -> "ReplicaTimeline":
        return cls(tuple((float(t), int(n)) for t, n in d["changes"]), float(d["end"]))


@dataclass(frozen=True)
class PenaltyBreakdown:
    latency_term: float
    failure_term: float
    resource_term: float
    total: float
    total_succeeded: int
    total_failed: int
    average_replicas: float
    normalized_failure_term: float
    normalized_total: float
    params: PenaltyParams

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def latency_term(batches: Iterable) -> float:
    """Success-weighted mean of squared batch mean latencies; 0 when nothing succeeded."""
    num = []
    den = 0
    for b in batches:
        if b.succeeded > 0:
            num.append(b.succeeded * b.mean_response_time ** 2)
            den += b.succeeded
    if den == 0:
        return 0.0
    return math.fsum(num) / den


def average_replicas(timeline: ReplicaTimeline) -> float:
    start = timeline.changes[0][0]
    span = timeline.end - start
    if span <= 0:
        return float(timeline.changes[0][1])
    bounds = [t for t, _ in timeline.changes[1:]] + [timeline.end]
    area = math.fsum(n * (hi - t) for (t, n), hi in zip(timeline.changes, bounds))
    return area / span


def penalty(batches: Sequence, timeline: ReplicaTimeline,
            params: PenaltyParams | None = None) -> PenaltyBreakdown:
    params = params or PenaltyParams()
    batches = list(batches)
    succ = sum(b.succeeded for b in batches)
    failed = sum(b.failed for b in batches)
    lat = latency_term(batches)
    fail = failed * params.failed_request_penalty
    avg = average_replicas(timeline)
    res = avg * params.scarcity_factor
    dispatched = succ + failed
    norm_fail = fail / dispatched if dispatched else 0.0
    return PenaltyBreakdown(
        latency_term=lat,
        failure_term=fail,
        resource_term=res,
        total=lat + fail + res,
        total_succeeded=succ,
        total_failed=failed,
        average_replicas=avg,
        normalized_failure_term=norm_fail,
        normalized_total=lat + norm_fail + res,
        params=params,
    )
