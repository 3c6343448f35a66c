"""Experiment orchestration.

One run wires a trace window through the batch load generator into a
target (the simulated cluster, or a live URL) while the autoscaler ticks,
then scores the run. ``compare_models`` repeats that for several models
and repetitions and tabulates the penalties.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import platform
import random
import sys
import threading
import time
from dataclasses import dataclass, field, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from importlib import resources
from pathlib import Path
from typing import Sequence

import yaml

from .autoscaler import Autoscaler, AutoscalerConfig, Recommendation, TickRecord, write_tick_log
from .loadgen import BatchResult, HttpTarget, plan_batches, run_load, write_batch_log
from .scoring import PenaltyBreakdown, PenaltyParams, ReplicaTimeline, penalty
from .simcluster import Cluster, ClusterTarget, ServiceModel, write_event_log
from .trace import BinaryRecordLayout, TraceEvent, load_trace, slice_window

log = logging.getLogger(__name__)

CSV_COLUMNS = ("time_s", "requests", "succeeded", "failed", "mean_latency_s",
               "ready_replicas", "desired_replicas")
BUILTIN_PREFIX = "builtin:"


class ConfigError(ValueError):
    pass


class StartupError(RuntimeError):
    pass


class CompareError(RuntimeError):
    def __init__(self, message: str, partial: "ComparisonTable"):
        super().__init__(message)
        self.partial = partial


# -- configuration ------------------------------------------------------

@dataclass
class TraceSource:
    path: str
    format: str = "text"
    layout: BinaryRecordLayout | None = None
    rebase: bool = False
    start: float = 0.0


@dataclass
class LiveTarget:
    url: str
    body: object = None
    headers: dict = field(default_factory=dict)
    replica_timeline: str | None = None


@dataclass
class ClusterParams:
    startup_delay: float = 10.0
    utilization_window: float = 15.0
    initial_replicas: int = 1


@dataclass
class OutputConfig:
    dir: str | None = None
    dump_latencies: bool = False
    event_log: bool = False


@dataclass
class ExperimentConfig:
    trace: TraceSource
    mode: str = "simulate"
    target: LiveTarget | None = None
    batch_interval: float = 5.0
    duration: float = 1800.0
    timeout: float = 30.0
    seed: int = 0
    time_compression: float | None = None
    service: ServiceModel = field(default_factory=ServiceModel)
    cluster: ClusterParams = field(default_factory=ClusterParams)
    autoscaler: AutoscalerConfig = field(default_factory=AutoscalerConfig)
    penalty: PenaltyParams = field(default_factory=PenaltyParams)
    output: OutputConfig = field(default_factory=OutputConfig)
    base_dir: Path = field(default_factory=Path.cwd, compare=False)

    def __post_init__(self):
        for name in ("batch_interval", "duration", "timeout"):
            setattr(self, name, float(getattr(self, name)))
        if self.time_compression is not None:
            self.time_compression = float(self.time_compression)
        if not self.duration > 0:
            raise ConfigError("duration must be positive")
        if not self.batch_interval > 0 or not self.timeout > 0:
            raise ConfigError("batch_interval and timeout must be positive")
        if self.time_compression is not None and self.time_compression < 1:
            raise ConfigError("time_compression must be >= 1")
        if self.mode == "simulate":
            if self.target is not None:
                raise ConfigError("simulate mode takes no live target")
        elif self.mode == "live":
            if self.target is None or not self.target.url:
                raise ConfigError("live mode needs target.url")
        else:
            raise ConfigError(f"mode must be 'simulate' or 'live', got {self.mode!r}")
        if self.autoscaler.model == "oracle" and self.mode == "live":
            raise ConfigError("the oracle model only exists in simulate mode")

    def echo(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        d["service"].pop("rng_seed")
        return d

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path


def _section(cls, d, name):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{name} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    extra = set(d) - names
    if extra:
        raise ConfigError(f"unknown keys in {name}: {sorted(extra)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def config_from_dict(d: dict, base_dir: Path | None = None) -> ExperimentConfig:
    d = dict(d)
    known = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"base_dir"}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
    if "trace" not in d:
        raise ConfigError("config needs a trace section")
    tr = dict(d.pop("trace"))
    if "layout" in tr and tr["layout"] is not None:
        try:
            tr["layout"] = BinaryRecordLayout.from_dict(tr["layout"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"trace.layout: {exc}") from exc
    trace = _section(TraceSource, tr, "trace")
    if trace.format not in ("text", "binary"):
        raise ConfigError(f"trace.format must be text or binary, got {trace.format!r}")
    if trace.format == "binary" and trace.layout is None:
        raise ConfigError("binary traces need trace.layout")
    target = d.pop("target", None)
    service = dict(d.pop("service", None) or {})
    if "rng_seed" in service:
        raise ConfigError("service.rng_seed is derived from the top-level seed")
    try:
        return ExperimentConfig(
            trace=trace,
            target=None if target is None else _section(LiveTarget, target, "target"),
            service=_section(ServiceModel, service, "service"),
            cluster=_section(ClusterParams, d.pop("cluster", None), "cluster"),
            autoscaler=_section(AutoscalerConfig, d.pop("autoscaler", None), "autoscaler"),
            penalty=_section(PenaltyParams, d.pop("penalty", None), "penalty"),
            output=_section(OutputConfig, d.pop("output", None), "output"),
            base_dir=base_dir or Path.cwd(),
            **d,
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            d = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return config_from_dict(d, base_dir=path.parent)


def builtin_path(name: str) -> Path:
    return Path(str(resources.files("predscale") / "data" / name))


def load_events(cfg: ExperimentConfig) -> list[TraceEvent]:
    src = cfg.trace
    if src.path.startswith(BUILTIN_PREFIX):
        path = builtin_path(src.path[len(BUILTIN_PREFIX):])
    else:
        path = cfg.resolve(src.path)
    try:
        events = load_trace(path, src.format, src.layout, rebase=src.rebase)
    except OSError as exc:
        raise StartupError(f"cannot read trace {path}: {exc}") from exc
    except ValueError as exc:
        raise StartupError(f"bad trace {path}: {exc}") from exc
    return slice_window(events, src.start, cfg.duration)


# -- reports ------------------------------------------------------------

@dataclass
class ReportRow:
    time_s: float
    requests: int
    succeeded: int
    failed: int
    mean_latency_s: float | None
    ready_replicas: int | None
    desired_replicas: int | None


@dataclass
class ExperimentReport:
    model: str
    seed: int
    rows: list[ReportRow]
    penalty: PenaltyBreakdown | None
    config: dict
    batches: list[BatchResult] = field(default_factory=list)
    timeline: ReplicaTimeline | None = None
    ticks: list[TickRecord] = field(default_factory=list)
    reactive: list[Recommendation] = field(default_factory=list)
    sim_events: list | None = None
    wall_clock_s: float = 0.0

    @property
    def total_requests(self) -> int:
        return sum(r.requests for r in self.rows)

    @property
    def mean_latency(self) -> float | None:
        succ = sum(b.succeeded for b in self.batches)
        if not succ:
            return None
        return math.fsum(b.succeeded * b.mean_response_time for b in self.batches if b.succeeded) / succ

    def to_dict(self) -> dict:
        # wall clock lives in the sidecar meta file so identical runs give identical reports
        return {
            "model": self.model,
            "seed": self.seed,
            "summary": {
                "requests": self.total_requests,
                "succeeded": sum(r.succeeded for r in self.rows),
                "failed": sum(r.failed for r in self.rows),
                "mean_latency_s": self.mean_latency,
            },
            "penalty": None if self.penalty is None else self.penalty.to_dict(),
            "config": self.config,
            "rows": [dataclasses.asdict(r) for r in self.rows],
        }


def emit_report_csv(report: ExperimentReport, path) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in report.rows:
                w.writerow(["" if v is None else repr(v) for v in (getattr(r, c) for c in CSV_COLUMNS)])
    except OSError as exc:
        raise OSError(f"writing report CSV {path}: {exc}") from exc


def read_report_csv(path) -> list[ReportRow]:
    def opt(v, cast):
        return None if v == "" else cast(v)

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [ReportRow(
            time_s=float(d["time_s"]),
            requests=int(d["requests"]),
            succeeded=int(d["succeeded"]),
            failed=int(d["failed"]),
            mean_latency_s=opt(d["mean_latency_s"], float),
            ready_replicas=opt(d["ready_replicas"], int),
            desired_replicas=opt(d["desired_replicas"], int),
        ) for d in reader]


def write_report(report: ExperimentReport, out_dir, stem: str = "report") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    emit_report_csv(report, out / f"{stem}.csv")
    (out / f"{stem}.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    write_batch_log(report.batches, out / f"{stem}.batches.jsonl")
    if report.ticks:
        write_tick_log(report.ticks, out / f"{stem}.autoscaler.jsonl")
    if report.timeline is not None:
        (out / f"{stem}.timeline.json").write_text(json.dumps(report.timeline.to_dict()) + "\n",
                                                   encoding="utf-8")
    if report.sim_events is not None:
        write_event_log(report.sim_events, out / f"{stem}.events.jsonl")
    meta = {
        "wall_clock_s": report.wall_clock_s,
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    (out / f"{stem}.meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return out


# -- running ------------------------------------------------------------

def _rows(cfg: ExperimentConfig, events, results, cluster_timeline=None) -> list[ReportRow]:
    batches = plan_batches(events, cfg.batch_interval)
    by_index = {r.index: r for r in results}
    n_rows = max(math.ceil(cfg.duration / cfg.batch_interval), len(batches))
    rows = []
    k = 0
    for i in range(n_rows):
        t = i * cfg.batch_interval
        res = by_index.get(i)
        ready = desired = None
        if cluster_timeline is not None:
            while k + 1 < len(cluster_timeline) and cluster_timeline[k + 1][0] <= t:
                k += 1
            _, ready, desired = cluster_timeline[k]
        rows.append(ReportRow(
            time_s=t,
            requests=len(batches[i]) if i < len(batches) else 0,
            succeeded=res.succeeded if res else 0,
            failed=res.failed if res else 0,
            mean_latency_s=res.mean_response_time if res else None,
            ready_replicas=ready,
            desired_replicas=desired,
        ))
    return rows


def _ready_timeline(cluster_timeline, end: float) -> ReplicaTimeline:
    changes = []
    for t, ready, _ in cluster_timeline:
        if changes and changes[-1][1] == ready:
            continue
        if changes and changes[-1][0] == t:
            changes[-1] = (t, ready)
        else:
            changes.append((t, ready))
    return ReplicaTimeline(tuple(changes), end)


def run_experiment(cfg: ExperimentConfig, lookahead: Sequence[Recommendation] | None = None) -> ExperimentReport:
    """Run one experiment; in simulate mode the oracle model first runs a hold pass for lookahead."""
    events = load_events(cfg)
    if cfg.mode == "live":
        return _run_live(cfg, events)
    if cfg.autoscaler.model == "oracle" and lookahead is None:
        hold = run_experiment(replace(cfg, autoscaler=replace(cfg.autoscaler, model="hold")))
        lookahead = hold.reactive

    t_wall = time.perf_counter()
    ac = cfg.autoscaler
    cluster = Cluster(
        replace(cfg.service, rng_seed=cfg.seed),
        initial_replicas=max(cfg.cluster.initial_replicas, ac.min_replicas),
        min_replicas=ac.min_replicas,
        max_replicas=ac.max_replicas,
        startup_delay=cfg.cluster.startup_delay,
        timeout=cfg.timeout,
        utilization_window=cfg.cluster.utilization_window,
        record=cfg.output.event_log,
    )
    target = ClusterTarget(cluster, pace=cfg.time_compression)
    scaler = Autoscaler(
        ac,
        metric=cluster.cpu_utilization,
        current=lambda: cluster.desired_replicas,
        actuator=cluster.set_desired_replicas,
        lookahead=lookahead,
    )
    # registration order puts the reactive step first when both fall due together
    target.add_periodic(scaler.reactive_step, ac.reactive_interval)
    target.add_periodic(scaler.forecast_step, ac.forecast_interval)

    results = run_load(events, target, cfg.batch_interval, cfg.timeout,
                       keep_latencies=cfg.output.dump_latencies)
    target.wait_until(cfg.duration)
    end = cluster.now
    timeline = _ready_timeline(cluster.timeline, end)
    report = ExperimentReport(
        model=ac.model,
        seed=cfg.seed,
        rows=_rows(cfg, events, results, cluster.timeline),
        penalty=penalty(results, timeline, cfg.penalty),
        config=cfg.echo(),
        batches=results,
        timeline=timeline,
        ticks=scaler.log,
        reactive=scaler.reactive_log,
        sim_events=cluster.log,
        wall_clock_s=time.perf_counter() - t_wall,
    )
    if cfg.output.dir:
        write_report(report, cfg.resolve(cfg.output.dir))
    return report


def _run_live(cfg: ExperimentConfig, events) -> ExperimentReport:
    tgt = cfg.target
    timeline = None
    if tgt.replica_timeline:
        try:
            timeline = ReplicaTimeline.from_dict(json.loads(cfg.resolve(tgt.replica_timeline).read_text()))
        except (OSError, ValueError, KeyError) as exc:
            raise StartupError(f"cannot load replica timeline: {exc}") from exc
    try:
        HttpTarget(tgt.url).check_reachable()
    except ConnectionError as exc:
        raise StartupError(str(exc)) from exc
    t_wall = time.perf_counter()
    target = HttpTarget(tgt.url, tgt.body, tgt.headers)
    results = run_load(events, target, cfg.batch_interval, cfg.timeout,
                       keep_latencies=cfg.output.dump_latencies,
                       on_result=lambda r: log.info("batch %d: %d ok, %d failed", r.index, r.succeeded, r.failed))
    report = ExperimentReport(
        model="live",
        seed=cfg.seed,
        rows=_rows(cfg, events, results),
        penalty=None if timeline is None else penalty(results, timeline, cfg.penalty),
        config=cfg.echo(),
        batches=results,
        timeline=timeline,
        wall_clock_s=time.perf_counter() - t_wall,
    )
    if cfg.output.dir:
        write_report(report, cfg.resolve(cfg.output.dir))
    return report


# -- comparisons --------------------------------------------------------

@dataclass
class ComparisonRow:
    model: str
    repetition: int
    seed: int
    penalty_total: float
    failed: int
    mean_latency_s: float | None
    normalized_total: float
    average_replicas: float


@dataclass
class ComparisonTable:
    rows: list[ComparisonRow] = field(default_factory=list)
    reports: dict[tuple[str, int], ExperimentReport] = field(default_factory=dict)

    def aggregate(self) -> dict[str, dict]:
        out = {}
        for model in dict.fromkeys(r.model for r in self.rows):
            rs = [r for r in self.rows if r.model == model]
            lats = [r.mean_latency_s for r in rs if r.mean_latency_s is not None]
            out[model] = {
                "runs": len(rs),
                "penalty_total": math.fsum(r.penalty_total for r in rs) / len(rs),
                "failed": sum(r.failed for r in rs) / len(rs),
                "mean_latency_s": math.fsum(lats) / len(lats) if lats else None,
                "normalized_total": math.fsum(r.normalized_total for r in rs) / len(rs),
            }
        return out

    def write_csv(self, path) -> None:
        cols = [f.name for f in dataclasses.fields(ComparisonRow)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                w.writerow(["" if v is None else v for v in (getattr(r, c) for c in cols)])

    def format(self) -> str:
        lines = [f"{'model':<8} {'rep':>3} {'seed':>5} {'penalty':>12} {'failed':>7} {'mean_lat_s':>10} {'avg_repl':>8}"]
        for r in self.rows:
            lat = "-" if r.mean_latency_s is None else f"{r.mean_latency_s:.3f}"
            lines.append(f"{r.model:<8} {r.repetition:>3} {r.seed:>5} {r.penalty_total:>12.3f} "
                         f"{r.failed:>7} {lat:>10} {r.average_replicas:>8.3f}")
        lines.append("")
        for model, agg in self.aggregate().items():
            lines.append(f"{model:<8} mean penalty {agg['penalty_total']:.3f} over {agg['runs']} run(s)")
        return "\n".join(lines)


def compare_models(cfg: ExperimentConfig, models: Sequence[str], repetitions: int = 2,
                   out_dir=None) -> ComparisonTable:
    """Run every model for every repetition; repetition r uses seed ``cfg.seed + r``."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    table = ComparisonTable()
    hold_lookahead: dict[int, list[Recommendation]] = {}
    for model in models:
        for rep in range(repetitions):
            seed = cfg.seed + rep
            run_cfg = replace(cfg, seed=seed, autoscaler=replace(cfg.autoscaler, model=model),
                              output=replace(cfg.output, dir=None))
            try:
                report = run_experiment(run_cfg, lookahead=hold_lookahead.get(seed) if model == "oracle" else None)
            except Exception as exc:
                if out is not None:
                    table.write_csv(out / "comparison.partial.csv")
                raise CompareError(f"run {model} rep {rep} failed: {exc}", table) from exc
            if model == "hold":
                hold_lookahead[seed] = report.reactive
            if out is not None:
                write_report(report, out / f"{model}_rep{rep}")
            pb = report.penalty
            table.rows.append(ComparisonRow(
                model=model, repetition=rep, seed=seed,
                penalty_total=pb.total, failed=pb.total_failed,
                mean_latency_s=report.mean_latency,
                normalized_total=pb.normalized_total,
                average_replicas=pb.average_replicas,
            ))
            table.reports[(model, rep)] = report
    if out is not None:
        table.write_csv(out / "comparison.csv")
        (out / "comparison.json").write_text(json.dumps(table.aggregate(), indent=2) + "\n", encoding="utf-8")
    return table


# -- stub HTTP target ---------------------------------------------------

class StubServer:
    """Handle for a running stub target; use as a context manager or call ``shutdown``."""

    def __init__(self, httpd: ThreadingHTTPServer):
        self.httpd = httpd
        self._thread = threading.Thread(target=httpd.serve_forever, daemon=True)
        self._thread.start()

    @property
    def port(self) -> int:
        return self.httpd.server_address[1]

    @property
    def url(self) -> str:
        host = self.httpd.server_address[0]
        return f"http://{host}:{self.port}/run"

    @property
    def outcomes(self) -> list[int]:
        return list(self.httpd.outcomes)

    def shutdown(self) -> None:
        if not self._thread.is_alive():
            return
        self.httpd.shutdown()
        self.httpd.server_close()
        self._thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


class _StubHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    # headers and body go out in separate writes; without this, keep-alive
    # clients stall on delayed ACKs
    disable_nagle_algorithm = True

    def do_POST(self):
        srv = self.server
        length = int(self.headers.get("Content-Length") or 0)
        if length:
            self.rfile.read(length)
        with srv.lock:
            fail = srv.rng.random() < srv.failure_rate
            srv.outcomes.append(500 if fail else 200)
        if srv.latency > 0:
            time.sleep(srv.latency)
        body = b'{"error": "injected failure"}' if fail else b'{"stdout": "hello there\\n"}'
        self.send_response(500 if fail else 200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, fmt, *args):
        log.debug("stub: " + fmt, *args)


def serve_stub_target(latency: float = 0.05, failure_rate: float = 0.0, port: int = 0,
                      seed: int = 0, host: str = "127.0.0.1") -> StubServer:
    """Start a POST endpoint that answers after ``latency`` seconds and fails at ``failure_rate``.

    Failure decisions come from a seeded generator in request-arrival order.
    """
    if latency < 0 or not 0 <= failure_rate <= 1:
        raise ValueError("latency >= 0 and failure_rate in [0, 1] required")

    class _Server(ThreadingHTTPServer):
        daemon_threads = True
        request_queue_size = 1024

    try:
        httpd = _Server((host, port), _StubHandler)
    except OSError as exc:
        raise StartupError(f"cannot bind stub target on {host}:{port}: {exc}") from exc
    httpd.latency = latency
    httpd.failure_rate = failure_rate
    httpd.rng = random.Random(seed)
    httpd.lock = threading.Lock()
    httpd.outcomes = []
    return StubServer(httpd)

