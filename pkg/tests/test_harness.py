import json
import time
from dataclasses import replace

import pytest
import yaml

from predscale.harness import (
    CSV_COLUMNS,
    CompareError,
    ComparisonRow,
    ComparisonTable,
    ConfigError,
    ExperimentReport,
    ReportRow,
    StartupError,
    compare_models,
    config_from_dict,
    emit_report_csv,
    load_config,
    read_report_csv,
    run_experiment,
    serve_stub_target,
)
from predscale.trace import TraceEvent, format_text_trace, synthetic_bursty_trace


def write_trace(path, times):
    path.write_bytes(format_text_trace(TraceEvent(t) for t in times))
    return path


def sim_cfg(tmp_path, times, **over):
    trace = write_trace(tmp_path / "trace.txt", times)
    d = {"trace": {"path": str(trace)}, "duration": 120, "service": {"base_service_time": 0.05}}
    d.update(over)
    return config_from_dict(d, base_dir=tmp_path)


def constant_times(rate, duration):
    return [i / rate for i in range(int(rate * duration))]


class TestConfig:
    def test_bundled_config_loads(self):
        cfg = load_config("configs/bursty_30min.yaml")
        assert cfg.duration == 1800 and cfg.batch_interval == 5
        assert cfg.autoscaler.cpu_target == 0.75 and cfg.autoscaler.max_replicas == 10
        assert cfg.cluster.startup_delay == 10

    def test_live_config_loads(self):
        cfg = load_config("configs/live_stub.yaml")
        assert cfg.mode == "live" and cfg.target.url.endswith("/run")

    @pytest.mark.parametrize("d", [
        {},
        {"trace": {"path": "x"}, "duration": 0},
        {"trace": {"path": "x"}, "time_compression": 0.5},
        {"trace": {"path": "x"}, "mode": "live"},
        {"trace": {"path": "x"}, "mode": "batch"},
        {"trace": {"path": "x"}, "target": {"url": "http://h/run"}},
        {"trace": {"path": "x"}, "mode": "live", "target": {"url": "http://h/run"},
         "autoscaler": {"model": "oracle"}},
        {"trace": {"path": "x"}, "bogus": 1},
        {"trace": {"path": "x"}, "autoscaler": {"cpu_target": 2}},
        {"trace": {"path": "x"}, "service": {"rng_seed": 3}},
        {"trace": {"path": "x", "format": "binary"}},
    ])
    def test_invalid(self, d):
        with pytest.raises(ConfigError):
            config_from_dict(d)

    def test_unreadable_config(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.yaml")
        (tmp_path / "bad.yaml").write_text("- a\n- b\n")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "bad.yaml")

    def test_missing_trace_is_startup_error(self, tmp_path):
        cfg = config_from_dict({"trace": {"path": "nope.txt"}}, base_dir=tmp_path)
        with pytest.raises(StartupError):
            run_experiment(cfg)


class TestRunExperiment:
    def test_empty_trace(self, tmp_path):
        rep = run_experiment(sim_cfg(tmp_path, []))
        assert len(rep.rows) == 120 / 5
        assert all((r.requests, r.succeeded, r.failed) == (0, 0, 0) for r in rep.rows)
        assert rep.penalty.total == rep.penalty.average_replicas == 1.0

    def test_under_capacity_is_flat_at_min(self, tmp_path):
        times = constant_times(2.0, 120)
        rep = run_experiment(sim_cfg(tmp_path, times, autoscaler={"model": "knn"}))
        assert rep.penalty.total_failed == 0
        assert {r.ready_replicas for r in rep.rows} == {1}
        assert {r.desired_replicas for r in rep.rows} == {1}

    def test_conservation_and_row_grid(self, tmp_path):
        times = [e.timestamp for e in synthetic_bursty_trace(duration=120, seed=5)]
        rep = run_experiment(sim_cfg(tmp_path, times))
        assert [r.time_s for r in rep.rows] == [5.0 * i for i in range(24)]
        assert sum(r.requests for r in rep.rows) == sum(r.succeeded + r.failed for r in rep.rows) == len(times)
        assert all(r.requests >= 0 and r.failed >= 0 for r in rep.rows)

    def test_window_start(self, tmp_path):
        cfg = sim_cfg(tmp_path, [1, 50, 130, 140], duration=20)
        cfg = replace(cfg, trace=replace(cfg.trace, start=125))
        rep = run_experiment(cfg)
        # [125, 145) keeps 130 and 140, rebased to 5 and 15
        assert [r.requests for r in rep.rows] == [0, 1, 0, 1]

    def test_identical_runs_give_identical_bytes(self, tmp_path):
        times = [e.timestamp for e in synthetic_bursty_trace(duration=300, seed=2)]
        names = ("report.csv", "report.json", "report.batches.jsonl", "report.autoscaler.jsonl",
                 "report.timeline.json", "report.events.jsonl")
        snapshots = []
        for _ in range(2):
            cfg = sim_cfg(tmp_path, times, duration=300, service={"jitter_fraction": 0.3},
                          output={"dir": "run", "event_log": True})
            run_experiment(cfg)
            snapshots.append({n: (tmp_path / "run" / n).read_bytes() for n in names})
        assert snapshots[0] == snapshots[1]
        assert json.loads((tmp_path / "run" / "report.meta.json").read_text())["wall_clock_s"] >= 0

    def test_time_compression_only_changes_wall_clock(self, tmp_path):
        times = constant_times(5.0, 20)
        fast = run_experiment(sim_cfg(tmp_path, times, duration=20))
        t0 = time.perf_counter()
        paced = run_experiment(sim_cfg(tmp_path, times, duration=20, time_compression=100))
        wall = time.perf_counter() - t0
        a, b = paced.to_dict(), fast.to_dict()
        assert a.pop("config")["time_compression"] == 100
        b.pop("config")
        assert a == b
        assert wall >= 20 / 100 * 0.8

    def test_report_echoes_config(self, tmp_path):
        rep = run_experiment(sim_cfg(tmp_path, [0.5], autoscaler={"knn_k": 5}))
        d = rep.to_dict()
        assert d["config"]["autoscaler"]["knn_k"] == 5
        assert d["model"] == "hold" and d["penalty"]["params"]["failed_request_penalty"] == 900

    def test_oracle_not_worse_than_hold_on_bursts(self, tmp_path):
        times = [e.timestamp for e in synthetic_bursty_trace(duration=600, seed=4)]
        base = sim_cfg(tmp_path, times, duration=600, service={"jitter_fraction": 0.2})
        hold = run_experiment(base)
        oracle = run_experiment(replace(base, autoscaler=replace(base.autoscaler, model="oracle")))
        assert oracle.penalty.total <= hold.penalty.total


class TestCsv:
    def test_header_only(self, tmp_path):
        rep = ExperimentReport("hold", 0, [], None, {})
        emit_report_csv(rep, tmp_path / "r.csv")
        assert (tmp_path / "r.csv").read_text().splitlines() == [",".join(CSV_COLUMNS)]

    def test_rows_and_round_trip(self, tmp_path):
        rows = [ReportRow(0.0, 3, 3, 0, 0.1 + 0.2, 1, 2),
                ReportRow(5.0, 0, 0, 0, None, 2, 2),
                ReportRow(10.0, 4, 1, 3, 1 / 3, None, None)]
        rep = ExperimentReport("hold", 0, rows, None, {})
        p = tmp_path / "r.csv"
        emit_report_csv(rep, p)
        assert len(p.read_text().splitlines()) == 4
        assert read_report_csv(p) == rows

    def test_io_error_names_path(self, tmp_path):
        rep = ExperimentReport("hold", 0, [], None, {})
        with pytest.raises(OSError, match="nodir"):
            emit_report_csv(rep, tmp_path / "nodir" / "r.csv")

    def test_simulated_report_round_trip(self, tmp_path):
        rep = run_experiment(sim_cfg(tmp_path, constant_times(3.0, 60), duration=60))
        emit_report_csv(rep, tmp_path / "r.csv")
        assert read_report_csv(tmp_path / "r.csv") == rep.rows


class TestCompare:
    def test_single(self, tmp_path):
        cfg = sim_cfg(tmp_path, constant_times(3.0, 60), duration=60)
        table = compare_models(cfg, ["hold"], 1)
        assert len(table.rows) == 1
        assert table.rows[0].penalty_total == run_experiment(cfg).penalty.total

    def test_six_runs_with_artifacts(self, tmp_path):
        times = [e.timestamp for e in synthetic_bursty_trace(duration=200, seed=1)]
        cfg = sim_cfg(tmp_path, times, duration=200, service={"jitter_fraction": 0.2})
        out = tmp_path / "cmp"
        table = compare_models(cfg, ["hold", "linear", "knn"], 2, out_dir=out)
        assert [(r.model, r.repetition, r.seed) for r in table.rows] == [
            (m, k, k) for m in ("hold", "linear", "knn") for k in (0, 1)]
        for m in ("hold", "linear", "knn"):
            for k in (0, 1):
                assert (out / f"{m}_rep{k}" / "report.csv").exists()
                assert (m, k) in table.reports
        assert (out / "comparison.csv").read_text().count("\n") == 7
        agg = json.loads((out / "comparison.json").read_text())
        assert set(agg) == {"hold", "linear", "knn"}

    def test_aggregate_is_mean(self):
        t = ComparisonTable([ComparisonRow("knn", 0, 0, 10.0, 1, 0.2, 5.0, 1.0),
                             ComparisonRow("knn", 1, 1, 20.0, 3, None, 7.0, 2.0)])
        agg = t.aggregate()["knn"]
        assert (agg["penalty_total"], agg["failed"], agg["mean_latency_s"], agg["runs"]) == (15.0, 2.0, 0.2, 2)
        assert "knn" in t.format()

    def test_failure_keeps_partial(self, tmp_path, monkeypatch):
        import predscale.harness as h

        cfg = sim_cfg(tmp_path, [1.0], duration=10)
        real = h.run_experiment

        def flaky(c, lookahead=None):
            if c.autoscaler.model == "knn":
                raise RuntimeError("boom")
            return real(c, lookahead)

        monkeypatch.setattr(h, "run_experiment", flaky)
        with pytest.raises(CompareError) as err:
            compare_models(cfg, ["hold", "knn"], 1, out_dir=tmp_path / "cmp")
        assert len(err.value.partial.rows) == 1
        assert (tmp_path / "cmp" / "comparison.partial.csv").read_text().count("\n") == 2

    def test_bad_reps(self, tmp_path):
        with pytest.raises(ValueError):
            compare_models(sim_cfg(tmp_path, []), ["hold"], 0)


class TestStub:
    def _post(self, url, n):
        import httpx

        with httpx.Client(timeout=5) as c:
            return [c.post(url, json={"code": "x"}) for _ in range(n)]

    def test_success_with_latency(self, stub_server):
        srv = stub_server(latency=0.05)
        t0 = time.perf_counter()
        resps = self._post(srv.url, 3)
        assert [r.status_code for r in resps] == [200] * 3
        assert time.perf_counter() - t0 >= 3 * 0.05

    def test_always_fails(self, stub_server):
        srv = stub_server(latency=0.0, failure_rate=1.0)
        assert {r.status_code for r in self._post(srv.url, 4)} == {500}

    def test_seeded_failure_positions(self, stub_server):
        runs = []
        for _ in range(2):
            srv = stub_server(latency=0.0, failure_rate=0.2, seed=11)
            runs.append([r.status_code for r in self._post(srv.url, 100)])
            srv.shutdown()
        assert runs[0] == runs[1]
        assert 5 < runs[0].count(500) < 40

    def test_port_in_use(self, stub_server):
        srv = stub_server(latency=0.0)
        with pytest.raises(StartupError):
            serve_stub_target(port=srv.port)

    def test_shutdown_is_idempotent(self):
        srv = serve_stub_target(latency=0.0)
        srv.shutdown()
        srv.shutdown()


class TestLive:
    def test_short_live_run(self, tmp_path, stub_server):
        srv = stub_server(latency=0.01)
        trace = write_trace(tmp_path / "t.txt", [0.0, 0.5, 1.0, 5.2, 6.0])
        tl = tmp_path / "tl.json"
        tl.write_text(json.dumps({"changes": [[0.0, 2]], "end": 10.0}))
        cfg = config_from_dict({
            "trace": {"path": str(trace)}, "mode": "live", "duration": 10, "timeout": 5,
            "target": {"url": srv.url, "replica_timeline": str(tl)},
        })
        rep = run_experiment(cfg)
        assert [(r.requests, r.succeeded) for r in rep.rows] == [(3, 3), (2, 2)]
        assert rep.batches[1].dispatch_time >= 5.0
        assert rep.penalty.average_replicas == 2.0 and rep.penalty.total_failed == 0
        assert len(srv.outcomes) == 5

    def test_live_without_timeline_has_no_penalty(self, tmp_path, stub_server):
        srv = stub_server(latency=0.0)
        cfg = config_from_dict({"trace": {"path": str(write_trace(tmp_path / "t.txt", [0.0]))},
                                "mode": "live", "duration": 5, "target": {"url": srv.url}})
        assert run_experiment(cfg).penalty is None

    def test_unreachable_target_fails_before_load(self, tmp_path, free_port):
        cfg = config_from_dict({"trace": {"path": str(write_trace(tmp_path / "t.txt", [0.0]))},
                                "mode": "live", "duration": 5,
                                "target": {"url": f"http://127.0.0.1:{free_port}/run"}})
        with pytest.raises(StartupError):
            run_experiment(cfg)


def test_yaml_round_trip_of_echo(tmp_path):
    cfg = sim_cfg(tmp_path, [])
    echoed = yaml.safe_load(yaml.safe_dump(cfg.echo()))
    echoed["trace"]["layout"] = None
    again = config_from_dict({k: v for k, v in echoed.items()}, base_dir=tmp_path)
    assert again == cfg
