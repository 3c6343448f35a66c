"""Reactive replica recommendations and single-step replica forecasts.

The reactive rule is the usual ratio formula with a tolerance dead-band::

    desired = ceil(current * utilization / target)

Each reactive recommendation is cached in a short history (12 entries,
two minutes). A predictive model reads that history and picks the replica
count for ``now + horizon``; the chosen count is what gets applied.
"""

from __future__ import annotations

import json
import math
from bisect import bisect_right
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

MODELS = ("hold", "linear", "knn", "oracle")
COMBINE_POLICIES = ("model-only", "max-with-reactive")


class InsufficientData(ValueError):
    """The forecaster does not have enough history to produce a value."""


class HistoryOrderError(ValueError):
    pass


@dataclass(frozen=True)
class Recommendation:
    time: float
    replicas: int


@dataclass
class AutoscalerConfig:
    cpu_target: float = 0.75
    tolerance: float = 0.10
    min_replicas: int = 1
    max_replicas: int = 10
    reactive_interval: float = 15.0
    forecast_interval: float = 10.0
    forecast_horizon: float = 10.0
    model: str = "hold"
    knn_k: int = 3
    history_capacity: int = 12
    history_span: float = 120.0
    combine: str = "model-only"

    def __post_init__(self):
        for name in ("reactive_interval", "forecast_interval", "forecast_horizon", "history_span"):
            setattr(self, name, float(getattr(self, name)))
        if not 0 < self.cpu_target <= 1:
            raise ValueError("cpu_target must lie in (0, 1]")
        if self.tolerance < 0:
            raise ValueError("tolerance must be >= 0")
        if not 1 <= self.min_replicas <= self.max_replicas:
            raise ValueError("need 1 <= min_replicas <= max_replicas")
        for name in ("reactive_interval", "forecast_interval", "history_span"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.forecast_horizon < 0:
            raise ValueError("forecast_horizon must be >= 0")
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}; choose from {MODELS}")
        if self.knn_k < 1 or self.history_capacity < 1:
            raise ValueError("knn_k and history_capacity must be >= 1")
        if self.combine not in COMBINE_POLICIES:
            raise ValueError(f"unknown combine policy {self.combine!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "AutoscalerConfig":
        names = {f.name for f in fields(cls)}
        extra = set(d) - names
        if extra:
            raise ValueError(f"unknown autoscaler keys: {sorted(extra)}")
        return cls(**d)

    def clamp(self, n: int) -> int:
        return min(max(n, self.min_replicas), self.max_replicas)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def reactive_recommend(current: int, utilization: float, cfg: AutoscalerConfig,
                       time: float = 0.0) -> Recommendation:
    if current < 1:
        raise ValueError("current replica count must be >= 1")
    if not 0 <= utilization <= 1:
        raise ValueError(f"utilization {utilization} outside [0, 1]")
    ratio = utilization / cfg.cpu_target
    if abs(ratio - 1.0) <= cfg.tolerance:
        n = current
    else:
        n = math.ceil(current * ratio)
    return Recommendation(time, cfg.clamp(n))


@dataclass
class RecommendationHistory:
    capacity: int = 12
    window_span: float = 120.0
    entries: list[Recommendation] = field(default_factory=list)

    def push(self, rec: Recommendation) -> "RecommendationHistory":
        if self.entries and rec.time < self.entries[-1].time:
            raise HistoryOrderError(
                f"recommendation at t={rec.time} is older than newest entry t={self.entries[-1].time}")
        self.entries.append(rec)
        if len(self.entries) > self.capacity:
            del self.entries[: len(self.entries) - self.capacity]
        cutoff = rec.time - self.window_span
        drop = 0
        while drop < len(self.entries) and self.entries[drop].time < cutoff:
            drop += 1
        if drop:
            del self.entries[:drop]
        return self

    def __len__(self):
        return len(self.entries)

    @property
    def newest(self) -> Recommendation:
        if not self.entries:
            raise InsufficientData("empty recommendation history")
        return self.entries[-1]


def forecast_hold(history: RecommendationHistory) -> int:
    return history.newest.replicas


def linear_prediction(history: RecommendationHistory, target_time: float) -> float:
    """Unrounded least-squares line through (time, replicas), evaluated at ``target_time``."""
    if len(history) < 2:
        raise InsufficientData("linear fit needs at least two recommendations")
    ts = [e.time for e in history.entries]
    ys = [e.replicas for e in history.entries]
    t_mean = math.fsum(ts) / len(ts)
    y_mean = math.fsum(ys) / len(ys)
    sxx = math.fsum((t - t_mean) ** 2 for t in ts)
    if sxx == 0:
        raise InsufficientData("all recommendations share one timestamp")
    sxy = math.fsum((t - t_mean) * (y - y_mean) for t, y in zip(ts, ys))
    return y_mean + (sxy / sxx) * (target_time - t_mean)


def forecast_linear(history: RecommendationHistory, target_time: float, cfg: AutoscalerConfig) -> int:
    return cfg.clamp(round_half_up(linear_prediction(history, target_time)))


def forecast_knn(history: RecommendationHistory, target_time: float, cfg: AutoscalerConfig) -> int:
    # neighbours on the time axis; on equal distance the more recent entry wins
    if not history.entries:
        raise InsufficientData("empty recommendation history")
    k = min(cfg.knn_k, len(history))
    ranked = sorted(enumerate(history.entries),
                    key=lambda ie: (abs(ie[1].time - target_time), -ie[1].time, -ie[0]))
    chosen = [e.replicas for _, e in ranked[:k]]
    return cfg.clamp(round_half_up(sum(chosen) / k))


def forecast_oracle(future_reactive: Sequence[Recommendation], target_time: float) -> int:
    """Reactive recommendation in force at ``target_time`` (step function over the lookahead)."""
    if not future_reactive:
        raise InsufficientData("no lookahead recommendations")
    times = [r.time for r in future_reactive]
    if target_time > times[-1]:
        raise InsufficientData(f"lookahead ends at t={times[-1]}, before t={target_time}")
    i = bisect_right(times, target_time)
    if i == 0:
        raise InsufficientData(f"no lookahead recommendation at or before t={target_time}")
    return future_reactive[i - 1].replicas


@dataclass
class TickRecord:
    time: float
    kind: str
    current: int
    utilization: float | None = None
    reactive: int | None = None
    forecast: int | None = None
    applied: int | None = None
    fallback: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self))


class Autoscaler:
    """Predictive scaling loop over a metric source and a replica actuator.

    ``reactive_step`` runs every ``reactive_interval`` and feeds the history;
    ``forecast_step`` runs every ``forecast_interval`` and applies the
    configured model's value for ``now + forecast_horizon``.
    """

    def __init__(self, cfg: AutoscalerConfig, metric: Callable[[], float],
                 current: Callable[[], int], actuator: Callable[[int, float], None],
                 lookahead: Sequence[Recommendation] | None = None):
        self.cfg = cfg
        self.metric = metric
        self.current = current
        self.actuator = actuator
        self.lookahead = list(lookahead) if lookahead is not None else None
        self.history = RecommendationHistory(cfg.history_capacity, cfg.history_span)
        self.log: list[TickRecord] = []
        self.reactive_log: list[Recommendation] = []
        self._last_reactive: int | None = None

    def reactive_step(self, now: float) -> Recommendation:
        util = self.metric()
        cur = self.current()
        rec = reactive_recommend(cur, util, self.cfg, time=now)
        self.history.push(rec)
        self.reactive_log.append(rec)
        self._last_reactive = rec.replicas
        self.log.append(TickRecord(now, "reactive", cur, utilization=util, reactive=rec.replicas))
        return rec

    def _model_forecast(self, target_time: float) -> int:
        model = self.cfg.model
        if model == "hold":
            return forecast_hold(self.history)
        if model == "linear":
            return forecast_linear(self.history, target_time, self.cfg)
        if model == "knn":
            return forecast_knn(self.history, target_time, self.cfg)
        if self.lookahead is None:
            raise InsufficientData("oracle model needs a lookahead pass")
        return forecast_oracle(self.lookahead, target_time)

    def forecast_step(self, now: float) -> int:
        cur = self.current()
        fallback = None
        forecast = None
        try:
            forecast = self._model_forecast(now + self.cfg.forecast_horizon)
            value = forecast
        except InsufficientData:
            if self.history.entries:
                fallback = "hold"
                value = forecast_hold(self.history)
            else:
                fallback = "current"
                value = cur
        if self.cfg.combine == "max-with-reactive" and self._last_reactive is not None:
            value = max(value, self._last_reactive)
        applied = self.cfg.clamp(value)
        self.actuator(applied, now)
        self.log.append(TickRecord(now, "forecast", cur, forecast=forecast, applied=applied,
                                   fallback=fallback))
        return applied


def write_tick_log(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
