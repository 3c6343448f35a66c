"""Discrete-event model of a horizontally scaled service.

Pods serve up to ``per_pod_concurrency`` requests at a time. Arriving
requests wait in one FIFO queue and are handed to the ready pod whose
free slot has been idle longest (lowest pod id on ties). New pods only
serve after ``startup_delay``. A request that cannot finish within its
timeout fails at ``arrival + timeout``.

Scale-down takes capacity away immediately but lets busy pods drain:
pending pods are cancelled first, then idle pods, then the least busy.
"""

from __future__ import annotations

import heapq
import json
import math
import random
import time
from collections import deque
from dataclasses import asdict, dataclass, field

from .loadgen import RequestOutcome

QUEUED, SERVING, DROPPED, DONE, FAILED = range(5)


@dataclass(frozen=True)
class ServiceModel:
    base_service_time: float = 0.05
    jitter_fraction: float = 0.0
    per_pod_concurrency: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if not self.base_service_time > 0:
            raise ValueError("base_service_time must be positive")
        if not 0 <= self.jitter_fraction < 1:
            raise ValueError("jitter_fraction must lie in [0, 1)")
        if self.per_pod_concurrency < 1:
            raise ValueError("per_pod_concurrency must be >= 1")


@dataclass(frozen=True)
class SimEvent:
    kind: str
    time: float
    pod_id: int | None = None
    request_id: int | None = None
    latency: float | None = None
    detail: str | None = None

    def to_json(self) -> str:
        return json.dumps({k: v for k, v in asdict(self).items() if v is not None})


@dataclass
class PodRecord:
    id: int
    ready_at: float
    ready: bool = False
    draining: bool = False
    inflight: int = 0
    idle_since: list[float] = field(default_factory=list)
    busy: deque = field(default_factory=deque)


@dataclass(frozen=True)
class ClusterSnapshot:
    now: float
    desired_replicas: int
    ready_replicas: int
    pending_ready_at: tuple[float, ...]
    draining: int
    queue_length: int
    submitted: int
    completed: int
    failed: int

    @property
    def in_flight(self) -> int:
        return self.submitted - self.completed - self.failed


class Cluster:
    """Mutable simulation state, driven by ``submit``, ``set_desired_replicas`` and ``advance``."""

    def __init__(self, service: ServiceModel | None = None, *, initial_replicas: int = 1,
                 min_replicas: int = 1, max_replicas: int = 10, startup_delay: float = 10.0,
                 timeout: float = 30.0, utilization_window: float = 15.0, record: bool = False,
                 initial_ready: bool = True):
        self.service = service or ServiceModel()
        if not 1 <= min_replicas <= max_replicas:
            raise ValueError("need 1 <= min_replicas <= max_replicas")
        if not min_replicas <= initial_replicas <= max_replicas:
            raise ValueError("initial_replicas outside [min_replicas, max_replicas]")
        if startup_delay < 0 or not timeout > 0 or not utilization_window > 0:
            raise ValueError("startup_delay >= 0, timeout > 0 and utilization_window > 0 required")
        self.min_replicas = min_replicas
        self.max_replicas = max_replicas
        self.startup_delay = startup_delay
        self.timeout = timeout
        self.utilization_window = utilization_window
        self.now = 0.0
        self.log: list[SimEvent] | None = [] if record else None

        self._rng = random.Random(self.service.rng_seed)
        self._heap: list = []
        self._seq = 0
        self._next_pod = 0
        self.pods: dict[int, PodRecord] = {}
        self._queue: deque[int] = deque()
        self.queue_length = 0
        self._arrival: list[float] = []
        self._deadline: list[float] = []
        self._state: list[int] = []
        self._latency: list[float | None] = []
        self._has_timer: list[bool] = []
        self.submitted = self.completed = self.failed = 0
        self.timeline: list[tuple[float, int, int]] = []
        self._emitted: list[SimEvent] = []

        for _ in range(initial_replicas):
            if initial_ready:
                self._new_pod(ready_at=0.0).ready = True
            else:
                pod = self._new_pod(ready_at=startup_delay)
                self._push(pod.ready_at, "ready", pod.id)
        self._mark_timeline()

    # -- bookkeeping --------------------------------------------------

    def _new_pod(self, ready_at: float) -> PodRecord:
        pod = PodRecord(self._next_pod, ready_at,
                        idle_since=[ready_at] * self.service.per_pod_concurrency)
        self.pods[pod.id] = pod
        self._next_pod += 1
        return pod

    def _push(self, t: float, kind: str, *args) -> None:
        heapq.heappush(self._heap, (t, self._seq, kind, args))
        self._seq += 1

    def _emit(self, ev: SimEvent) -> None:
        self._emitted.append(ev)
        if self.log is not None:
            self.log.append(ev)

    def _mark_timeline(self) -> None:
        entry = (self.now, self.ready_replicas, self.desired_replicas)
        if self.timeline and self.timeline[-1][1:] == entry[1:]:
            return
        if self.timeline and self.timeline[-1][0] == self.now:
            self.timeline[-1] = entry
        else:
            self.timeline.append(entry)

    @property
    def desired_replicas(self) -> int:
        return sum(1 for p in self.pods.values() if not p.draining)

    @property
    def ready_replicas(self) -> int:
        return sum(1 for p in self.pods.values() if p.ready and not p.draining)

    @property
    def pending(self) -> list[PodRecord]:
        return [p for p in self.pods.values() if not p.ready]

    @property
    def in_flight(self) -> int:
        return self.submitted - self.completed - self.failed

    def snapshot(self) -> ClusterSnapshot:
        return ClusterSnapshot(
            now=self.now,
            desired_replicas=self.desired_replicas,
            ready_replicas=self.ready_replicas,
            pending_ready_at=tuple(sorted(p.ready_at for p in self.pending)),
            draining=sum(1 for p in self.pods.values() if p.draining),
            queue_length=self.queue_length,
            submitted=self.submitted,
            completed=self.completed,
            failed=self.failed,
        )

    def outcome(self, rid: int) -> RequestOutcome | None:
        """Final outcome of a request, or None while it is unresolved."""
        state = self._state[rid]
        if state == DONE:
            return RequestOutcome(latency=self._latency[rid])
        if state == FAILED:
            return RequestOutcome(error="timeout")
        return None

    # -- requests -----------------------------------------------------

    def submit(self, arrival: float, timeout: float | None = None) -> int:
        """Enqueue a request arriving at ``arrival``; returns its request id.

        The outcome is emitted later by ``advance`` as a ``completion`` or
        ``failure`` event carrying this id.
        """
        if arrival < self.now:
            raise ValueError(f"arrival {arrival} precedes simulation time {self.now}")
        if arrival > self.now:
            self.advance(arrival)
        rid = len(self._state)
        self._arrival.append(arrival)
        self._deadline.append(arrival + (self.timeout if timeout is None else timeout))
        self._state.append(QUEUED)
        self._latency.append(None)
        self._has_timer.append(False)
        self.submitted += 1
        self._queue.append(rid)
        self.queue_length += 1
        self._dispatch()
        if self._state[rid] == QUEUED:
            self._arm_timer(rid)
        return rid

    def _arm_timer(self, rid: int) -> None:
        if not self._has_timer[rid]:
            self._has_timer[rid] = True
            self._push(self._deadline[rid], "timeout", rid)

    def _service_time(self) -> float:
        base, j = self.service.base_service_time, self.service.jitter_fraction
        if j == 0:
            return base
        return base * self._rng.uniform(1.0 - j, 1.0 + j)

    def _free_pod(self) -> PodRecord | None:
        best = None
        best_key = None
        for pod in self.pods.values():
            if pod.ready and not pod.draining and pod.inflight < self.service.per_pod_concurrency:
                key = (min(pod.idle_since), pod.id)
                if best_key is None or key < best_key:
                    best, best_key = pod, key
        return best

    def _dispatch(self) -> None:
        while self._queue:
            rid = self._queue[0]
            if self._state[rid] != QUEUED:
                self._queue.popleft()
                continue
            pod = self._free_pod()
            if pod is None:
                return
            self._queue.popleft()
            self.queue_length -= 1
            service = self._service_time()
            end = self.now + service
            if end > self._deadline[rid]:
                # would finish past the deadline: give up without occupying the pod
                self._state[rid] = DROPPED
                self._arm_timer(rid)
                continue
            pod.idle_since.remove(min(pod.idle_since))
            pod.inflight += 1
            pod.busy.append((self.now, end))
            self._state[rid] = SERVING
            self._push(end, "done", rid, pod.id)

    # -- scaling ------------------------------------------------------

    def set_desired_replicas(self, n: int, now: float | None = None) -> None:
        if now is not None:
            if now < self.now:
                raise ValueError(f"cannot scale in the past ({now} < {self.now})")
            self.advance(now)
        requested = n
        n = min(max(int(n), self.min_replicas), self.max_replicas)
        if n != requested:
            self._emit(SimEvent("warning", self.now,
                                detail=f"requested {requested} replicas, clamped to {n}"))
        current = self.desired_replicas
        if n == current:
            return
        if n > current:
            for _ in range(n - current):
                pod = self._new_pod(self.now + self.startup_delay)
                self._push(pod.ready_at, "ready", pod.id)
        else:
            k = current - n
            pending = sorted(self.pending, key=lambda p: (p.ready_at, p.id), reverse=True)
            for pod in pending[:k]:
                del self.pods[pod.id]
                self._emit(SimEvent("cancelled", self.now, pod_id=pod.id))
            k -= min(k, len(pending))
            active = sorted((p for p in self.pods.values() if p.ready and not p.draining),
                            key=lambda p: (p.inflight, -p.id))
            for pod in active[:k]:
                if pod.inflight == 0:
                    del self.pods[pod.id]
                    self._emit(SimEvent("removed", self.now, pod_id=pod.id))
                else:
                    pod.draining = True
                    self._emit(SimEvent("draining", self.now, pod_id=pod.id))
        self._emit(SimEvent("scale", self.now, detail=f"{current}->{n}"))
        self._mark_timeline()

    # -- time ---------------------------------------------------------

    def next_event_time(self) -> float:
        return self._heap[0][0] if self._heap else math.inf

    def advance(self, until: float) -> list[SimEvent]:
        """Process every scheduled event with time <= ``until``; return what was emitted."""
        if until < self.now:
            raise ValueError(f"cannot advance backwards ({until} < {self.now})")
        self._emitted = out = []
        heap = self._heap
        while heap and heap[0][0] <= until:
            t, _, kind, args = heapq.heappop(heap)
            self.now = t
            if kind == "done":
                self._on_done(*args)
            elif kind == "timeout":
                self._on_timeout(*args)
            else:
                self._on_ready(*args)
        self.now = until
        self._emitted = []
        return out

    def _on_done(self, rid: int, pod_id: int) -> None:
        pod = self.pods[pod_id]
        lat = self.now - self._arrival[rid]
        self._state[rid] = DONE
        self._latency[rid] = lat
        self.completed += 1
        pod.inflight -= 1
        pod.idle_since.append(self.now)
        self._emit(SimEvent("completion", self.now, pod_id=pod_id, request_id=rid, latency=lat))
        if pod.draining and pod.inflight == 0:
            del self.pods[pod_id]
            self._emit(SimEvent("removed", self.now, pod_id=pod_id))
        self._dispatch()

    def _on_timeout(self, rid: int) -> None:
        state = self._state[rid]
        if state not in (QUEUED, DROPPED):
            return
        if state == QUEUED:
            self.queue_length -= 1
        self._state[rid] = FAILED
        self.failed += 1
        self._emit(SimEvent("failure", self.now, request_id=rid,
                            latency=self.now - self._arrival[rid], detail="timeout"))

    def _on_ready(self, pod_id: int) -> None:
        pod = self.pods.get(pod_id)
        if pod is None or pod.ready:
            return
        pod.ready = True
        self._emit(SimEvent("ready", self.now, pod_id=pod_id))
        self._mark_timeline()
        self._dispatch()

    # -- metrics ------------------------------------------------------

    def cpu_utilization(self) -> float:
        """Busy pod-seconds over the trailing window / available pod-seconds, in [0, 1]."""
        ready = [p for p in self.pods.values() if p.ready and not p.draining]
        if not ready:
            return 1.0
        lo = self.now - self.utilization_window
        busy = 0.0
        for pod in ready:
            while pod.busy and pod.busy[0][1] <= lo:
                pod.busy.popleft()
            for s, e in pod.busy:
                if s >= self.now:
                    break
                busy += min(e, self.now) - max(s, lo)
        cap = len(ready) * self.service.per_pod_concurrency * self.utilization_window
        return min(1.0, max(0.0, busy / cap))


def write_event_log(events, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(ev.to_json() + "\n")


class ClusterTarget:
    """Loadgen target backed by a ``Cluster`` in virtual time.

    Periodic callbacks (autoscaler ticks) run at ``first + k * interval``
    after all cluster events at or before that instant. With ``pace`` set,
    the loop sleeps so that virtual time runs at most ``pace`` times faster
    than the wall clock.
    """

    def __init__(self, cluster: Cluster, pace: float | None = None):
        self.cluster = cluster
        self.pace = pace
        self._periodic: list[list] = []
        self._wall0 = time.monotonic()

    def add_periodic(self, fn, interval: float, first: float | None = None) -> None:
        if not interval > 0:
            raise ValueError("interval must be positive")
        first = interval if first is None else first
        self._periodic.append([first, 0, interval, fn])

    def now(self) -> float:
        return self.cluster.now

    def wait_until(self, t: float) -> None:
        if t > self.cluster.now:
            self._run(t, None)

    def dispatch(self, count: int, timeout: float) -> list[RequestOutcome]:
        c = self.cluster
        ids = [c.submit(c.now, timeout) for _ in range(count)]
        waiting = {rid for rid in ids if c.outcome(rid) is None}
        self._run(math.inf, waiting)
        return [c.outcome(rid) for rid in ids]

    def _next_tick(self) -> float:
        return min((p[0] + p[1] * p[2] for p in self._periodic), default=math.inf)

    def _run(self, until: float, waiting: set | None) -> None:
        c = self.cluster
        while waiting is None or waiting:
            t_evt = c.next_event_time()
            t_tick = self._next_tick()
            nxt = min(t_evt, t_tick)
            if nxt > until:
                c.advance(until)
                return
            if nxt == math.inf:
                raise RuntimeError("simulation stalled with unresolved requests")
            evs = c.advance(nxt)
            if waiting:
                for ev in evs:
                    if ev.request_id is not None and ev.kind in ("completion", "failure"):
                        waiting.discard(ev.request_id)
            if t_tick <= t_evt:
                for p in self._periodic:
                    if p[0] + p[1] * p[2] == nxt:
                        p[1] += 1
                        p[3](nxt)
                if self.pace:
                    lag = self._wall0 + nxt / self.pace - time.monotonic()
                    if lag > 0:
                        time.sleep(lag)
