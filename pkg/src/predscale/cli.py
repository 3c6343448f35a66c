"""Command line entry point: ``predscale <command> ...``.

Exit codes: 0 success, 1 config or startup error, 2 runtime failure
(partial artifacts are left on disk).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import yaml

from .autoscaler import MODELS
from .harness import (
    CompareError,
    ConfigError,
    StartupError,
    compare_models,
    load_config,
    run_experiment,
    serve_stub_target,
)
from .loadgen import read_batch_log
from .scoring import PenaltyParams, ReplicaTimeline, penalty
from .trace import BinaryRecordLayout, TraceError, format_text_trace, load_trace, to_rate_series

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("predscale")


def _load_layout(path):
    if path is None:
        return None
    with open(path, encoding="utf-8") as fh:
        return BinaryRecordLayout.from_dict(yaml.safe_load(fh))


def _apply_overrides(cfg, args):
    if getattr(args, "model", None):
        cfg = replace(cfg, autoscaler=replace(cfg.autoscaler, model=args.model))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None):
        cfg = replace(cfg, output=replace(cfg.output, dir=str(Path(args.out).resolve())))
    return cfg


def _summary(report) -> str:
    pb = report.penalty
    lines = [f"model={report.model} seed={report.seed} requests={report.total_requests}"]
    if pb is not None:
        lines.append(f"latency_term={pb.latency_term:.6g} failure_term={pb.failure_term:.6g} "
                     f"resource_term={pb.resource_term:.6g} total={pb.total:.6g} "
                     f"(failed={pb.total_failed}, normalized_total={pb.normalized_total:.6g})")
    else:
        lines.append("penalty not computed: no replica timeline (use `predscale score`)")
    return "\n".join(lines)


def cmd_simulate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if cfg.mode != "simulate":
        raise ConfigError("config mode is not 'simulate'; use `loadtest` for live targets")
    report = run_experiment(cfg)
    print(_summary(report))
    if cfg.output.dir:
        print(f"artifacts in {cfg.resolve(cfg.output.dir)}")
    return EXIT_OK


def cmd_loadtest(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if cfg.mode != "live":
        raise ConfigError("config mode is not 'live'; use `simulate`")
    report = run_experiment(cfg)
    print(_summary(report))
    return EXIT_OK


def cmd_score(args) -> int:
    try:
        batches = read_batch_log(args.batch_log)
        timeline = ReplicaTimeline.from_dict(json.loads(Path(args.timeline).read_text()))
        params = PenaltyParams(args.failed_penalty, args.scarcity)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    print(penalty(batches, timeline, params).to_json(indent=2))
    return EXIT_OK


def cmd_trace(args) -> int:
    try:
        layout = _load_layout(args.layout)
        events = load_trace(args.file, args.format, layout, rebase=args.rebase)
    except (OSError, TraceError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    if args.action == "convert":
        data = format_text_trace(events, header=f"converted from {Path(args.file).name}")
        if args.out:
            Path(args.out).write_bytes(data)
        else:
            sys.stdout.buffer.write(data)
        return EXIT_OK
    if not events:
        print("events: 0")
        return EXIT_OK
    rs = to_rate_series(events, args.bucket, origin=events[0].timestamp)
    span = events[-1].timestamp - events[0].timestamp
    print(f"events: {len(events)}")
    print(f"first: {events[0].timestamp!r}  last: {events[-1].timestamp!r}  span_s: {span:.3f}")
    if span > 0:
        print(f"mean_rate: {len(events) / span:.3f} req/s")
    print(f"peak_{args.bucket:g}s_bucket: {max(rs.counts)} requests")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = cfg.resolve(cfg.output.dir or "compare-out")
    t0 = time.perf_counter()
    try:
        table = compare_models(cfg, args.models, args.reps, out_dir=out)
    except CompareError as exc:
        log.error("%s (partial results in %s)", exc, out)
        return EXIT_RUNTIME
    print(table.format())
    print(f"\n{len(table.rows)} runs in {time.perf_counter() - t0:.1f}s; reports in {out}")
    return EXIT_OK


def cmd_stub_target(args) -> int:
    server = serve_stub_target(args.latency, args.failure_rate, args.port, seed=args.seed, host=args.host)
    print(f"stub target listening on {server.url}", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="predscale", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run one simulated experiment")
    s.add_argument("config")
    s.add_argument("--model", choices=MODELS)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="output directory (overrides output.dir)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("loadtest", help="replay a trace against a live HTTP target")
    s.add_argument("config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_loadtest)

    s = sub.add_parser("score", help="recompute the penalty from a batch log and replica timeline")
    s.add_argument("batch_log")
    s.add_argument("timeline")
    s.add_argument("--failed-penalty", type=float, default=900.0)
    s.add_argument("--scarcity", type=float, default=1.0)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("trace", help="inspect or convert a trace file")
    s.add_argument("action", choices=("inspect", "convert"))
    s.add_argument("file")
    s.add_argument("--format", choices=("text", "binary"), default="text")
    s.add_argument("--layout", help="YAML binary record layout")
    s.add_argument("--rebase", action="store_true", help="shift timestamps so the first is 0")
    s.add_argument("--bucket", type=float, default=5.0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_trace)

    s = sub.add_parser("compare", help="run several models x repetitions and tabulate penalties")
    s.add_argument("config")
    s.add_argument("--models", nargs="+", choices=MODELS, default=["hold", "linear", "knn"])
    s.add_argument("--reps", type=int, default=2)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("stub-target", help="serve a fake code-execution endpoint")
    s.add_argument("--latency", type=float, default=0.05)
    s.add_argument("--failure-rate", type=float, default=0.0)
    s.add_argument("--port", type=int, default=8080)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_stub_target)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, StartupError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 2
        log.exception("run failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
