"""Batched load generation.

Trace events are grouped into fixed windows (5 s by default) and every
request of a window is fired at once. A batch starts at its scheduled
instant or, when the previous batch is still running, as soon as that
batch finishes, so slow batches push the rest of the schedule back.

Targets implement a small clock-plus-dispatch protocol so the same loop
drives the in-process simulator (virtual time) and a live HTTP service
(wall time).
"""

from __future__ import annotations

import asyncio
import json
import math
import socket
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Protocol, Sequence
from urllib.parse import urlsplit

from .trace import TraceEvent

DEFAULT_INTERVAL = 5.0
DEFAULT_TIMEOUT = 30.0
DEFAULT_BODY = {"language": "python", "code": 'print("hello there")'}


@dataclass(frozen=True)
class Batch:
    index: int
    scheduled_start: float
    events: tuple[TraceEvent, ...]

    def __len__(self):
        return len(self.events)


@dataclass(frozen=True)
class RequestOutcome:
    """Result of one request: a latency on success, an error kind otherwise."""
    latency: float | None = None
    error: str | None = None

    def __post_init__(self):
        if (self.latency is None) == (self.error is None):
            raise ValueError("an outcome is either a success with latency or a failure with error")

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class BatchResult:
    index: int
    dispatch_time: float
    succeeded: int
    failed: int
    mean_response_time: float | None
    wall_duration: float
    failures: dict[str, int] = field(default_factory=dict)
    latencies: list[float] | None = None

    @property
    def dispatched(self) -> int:
        return self.succeeded + self.failed

    @property
    def completion_time(self) -> float:
        return self.dispatch_time + self.wall_duration

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["latencies"] is None:
            del d["latencies"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BatchResult":
        return cls(
            index=int(d["index"]),
            dispatch_time=float(d["dispatch_time"]),
            succeeded=int(d["succeeded"]),
            failed=int(d["failed"]),
            mean_response_time=None if d.get("mean_response_time") is None else float(d["mean_response_time"]),
            wall_duration=float(d.get("wall_duration", 0.0)),
            failures=dict(d.get("failures", {})),
            latencies=d.get("latencies"),
        )


class Target(Protocol):
    def now(self) -> float:
        """Seconds since the run started, on the target's clock."""

    def wait_until(self, t: float) -> None:
        """Let time pass until ``t`` (no-op if already past)."""

    def dispatch(self, count: int, timeout: float) -> list[RequestOutcome]:
        """Fire ``count`` requests together at ``now()``; return once all resolved."""


def plan_batches(events: Sequence[TraceEvent], interval: float = DEFAULT_INTERVAL) -> list[Batch]:
    if not interval > 0:
        raise ValueError(f"interval must be positive, got {interval}")
    if not events:
        return []
    n_batches = int(math.floor(events[-1].timestamp / interval)) + 1
    groups: list[list[TraceEvent]] = [[] for _ in range(n_batches)]
    prev = -math.inf
    for ev in events:
        if ev.timestamp < prev:
            raise ValueError("events must be sorted by timestamp")
        prev = ev.timestamp
        groups[int(math.floor(ev.timestamp / interval))].append(ev)
    return [Batch(i, i * interval, tuple(g)) for i, g in enumerate(groups)]


def _mean(xs: list[float]) -> float | None:
    # shifted by the first sample so equal latencies average to exactly that value
    if not xs:
        return None
    x0 = xs[0]
    return x0 + math.fsum(x - x0 for x in xs) / len(xs)


def summarize(index: int, dispatch_time: float, wall_duration: float,
              outcomes: Iterable[RequestOutcome], keep_latencies: bool = False) -> BatchResult:
    lat = [o.latency for o in outcomes if o.ok]
    fails = Counter(o.error for o in outcomes if not o.ok)
    return BatchResult(
        index=index,
        dispatch_time=dispatch_time,
        succeeded=len(lat),
        failed=sum(fails.values()),
        mean_response_time=_mean(lat),
        wall_duration=wall_duration,
        failures=dict(sorted(fails.items())),
        latencies=lat if keep_latencies else None,
    )


def execute_batch(batch: Batch, target: Target, timeout: float = DEFAULT_TIMEOUT,
                  keep_latencies: bool = False) -> BatchResult:
    if not timeout > 0:
        raise ValueError("timeout must be positive")
    t0 = target.now()
    outcomes = target.dispatch(len(batch), timeout) if len(batch) else []
    if len(outcomes) != len(batch):
        raise RuntimeError(f"target resolved {len(outcomes)} of {len(batch)} requests")
    return summarize(batch.index, t0, target.now() - t0, list(outcomes), keep_latencies)


def run_load(events: Sequence[TraceEvent], target: Target, interval: float = DEFAULT_INTERVAL,
             timeout: float = DEFAULT_TIMEOUT, keep_latencies: bool = False,
             on_result=None) -> list[BatchResult]:
    """Replay ``events`` batch by batch; batch i+1 waits for batch i to finish."""
    results = []
    for batch in plan_batches(events, interval):
        target.wait_until(batch.scheduled_start)
        res = execute_batch(batch, target, timeout, keep_latencies)
        results.append(res)
        if on_result is not None:
            on_result(res)
    return results


def write_batch_log(results: Iterable[BatchResult], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r.to_dict()) + "\n")


def read_batch_log(path) -> list[BatchResult]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(BatchResult.from_dict(json.loads(line)))
    return out


class VirtualStubTarget:
    """Virtual-clock target answering every request after a fixed latency.

    Requests slower than the timeout fail at the timeout instant. With
    ``reachable=False`` every request fails immediately with ``connection``.
    """

    def __init__(self, latency: float, reachable: bool = True):
        self.latency = latency
        self.reachable = reachable
        self._now = 0.0

    def now(self) -> float:
        return self._now

    def wait_until(self, t: float) -> None:
        self._now = max(self._now, t)

    def dispatch(self, count: int, timeout: float) -> list[RequestOutcome]:
        if not self.reachable:
            return [RequestOutcome(error="connection")] * count
        if self.latency > timeout:
            self._now += timeout
            return [RequestOutcome(error="timeout")] * count
        self._now += self.latency
        return [RequestOutcome(latency=self.latency)] * count


class HttpTarget:
    """Live target: POSTs a fixed payload; success is a 2xx answer within the timeout."""

    def __init__(self, url: str, body=None, headers: dict | None = None):
        self.url = url
        self.body = DEFAULT_BODY if body is None else body
        self.headers = dict(headers or {})
        self._t0 = time.monotonic()

    def now(self) -> float:
        return time.monotonic() - self._t0

    def wait_until(self, t: float) -> None:
        delay = t - self.now()
        if delay > 0:
            time.sleep(delay)

    def check_reachable(self, timeout: float = 5.0) -> None:
        """Open a TCP connection to the target host; raise ``ConnectionError`` if that fails."""
        parts = urlsplit(self.url)
        port = parts.port or (443 if parts.scheme == "https" else 80)
        try:
            with socket.create_connection((parts.hostname, port), timeout=timeout):
                pass
        except OSError as exc:
            raise ConnectionError(f"target {self.url} unreachable: {exc}") from exc

    def dispatch(self, count: int, timeout: float) -> list[RequestOutcome]:
        return asyncio.run(self._fire(count, timeout))

    async def _fire(self, count: int, timeout: float) -> list[RequestOutcome]:
        import httpx

        limits = httpx.Limits(max_connections=None, max_keepalive_connections=None)
        kwargs = {"json": self.body} if not isinstance(self.body, (str, bytes)) else {"content": self.body}
        async with httpx.AsyncClient(timeout=timeout, limits=limits) as client:

            async def one() -> RequestOutcome:
                t0 = time.perf_counter()
                try:
                    resp = await asyncio.wait_for(
                        client.post(self.url, headers=self.headers, **kwargs), timeout)
                except (asyncio.TimeoutError, httpx.TimeoutException):
                    return RequestOutcome(error="timeout")
                except httpx.HTTPError:
                    return RequestOutcome(error="connection")
                if 200 <= resp.status_code < 300:
                    return RequestOutcome(latency=time.perf_counter() - t0)
                return RequestOutcome(error="status")

            return list(await asyncio.gather(*(one() for _ in range(count))))
