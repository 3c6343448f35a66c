import json
import subprocess
import sys

import pytest
import yaml

from predscale.cli import main
from predscale.loadgen import BatchResult, write_batch_log
from predscale.trace import TraceEvent, format_text_trace, pack_binary_trace, BinaryRecordLayout


@pytest.fixture
def small_config(tmp_path):
    trace = tmp_path / "t.txt"
    trace.write_bytes(format_text_trace(TraceEvent(i * 0.25) for i in range(200)))
    cfg = {"trace": {"path": "t.txt"}, "duration": 60, "output": {"dir": "out"}}
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_simulate_writes_artifacts(small_config, capsys):
    assert main(["simulate", str(small_config), "--model", "knn"]) == 0
    out = capsys.readouterr().out
    assert "model=knn" in out and "total=" in out
    report = json.loads((small_config.parent / "out" / "report.json").read_text())
    assert report["model"] == "knn" and report["summary"]["requests"] == 200


def test_simulate_out_override(small_config, tmp_path):
    assert main(["simulate", str(small_config), "--out", str(tmp_path / "elsewhere"), "--seed", "4"]) == 0
    assert json.loads((tmp_path / "elsewhere" / "report.json").read_text())["seed"] == 4


def test_compare(small_config, capsys):
    assert main(["compare", str(small_config), "--models", "hold", "knn", "--reps", "1"]) == 0
    assert "mean penalty" in capsys.readouterr().out
    assert (small_config.parent / "out" / "comparison.csv").read_text().count("\n") == 3


def test_score(tmp_path, capsys):
    write_batch_log([BatchResult(0, 0.0, 10, 0, 2.0, 2.0)], tmp_path / "b.jsonl")
    (tmp_path / "tl.json").write_text(json.dumps({"changes": [[0, 3]], "end": 60}))
    assert main(["score", str(tmp_path / "b.jsonl"), str(tmp_path / "tl.json")]) == 0
    assert json.loads(capsys.readouterr().out)["total"] == 7.0
    assert main(["score", str(tmp_path / "b.jsonl"), str(tmp_path / "tl.json"), "--scarcity", "2"]) == 0
    assert json.loads(capsys.readouterr().out)["total"] == 10.0


def test_score_bad_input(tmp_path):
    assert main(["score", str(tmp_path / "missing"), str(tmp_path / "missing")]) == 1


def test_trace_inspect_and_convert(tmp_path, capsys):
    layout = BinaryRecordLayout(record_size=20)
    (tmp_path / "l.yaml").write_text(yaml.safe_dump({"record_size": 20, "timestamp_offset": 0,
                                                     "timestamp_width": 4, "endianness": "big",
                                                     "timestamp_unit": "seconds"}))
    (tmp_path / "t.bin").write_bytes(pack_binary_trace([900, 905, 907], layout))
    args = ["--format", "binary", "--layout", str(tmp_path / "l.yaml"), "--rebase"]
    assert main(["trace", "inspect", str(tmp_path / "t.bin"), *args]) == 0
    out = capsys.readouterr().out
    assert "events: 3" in out and "span_s: 7.000" in out
    assert main(["trace", "convert", str(tmp_path / "t.bin"), *args, "--out", str(tmp_path / "t.txt")]) == 0
    lines = [line for line in (tmp_path / "t.txt").read_text().splitlines() if not line.startswith("#")]
    assert [float(x) for x in lines] == [0.0, 5.0, 7.0]


def test_trace_errors(tmp_path):
    (tmp_path / "bad.txt").write_text("1\nzzz\n")
    assert main(["trace", "inspect", str(tmp_path / "bad.txt")]) == 1
    assert main(["trace", "inspect", str(tmp_path / "missing.txt")]) == 1


def test_config_errors_exit_1(tmp_path, small_config):
    bad = tmp_path / "bad.yaml"
    bad.write_text("trace: {path: t.txt}\nduration: -3\n")
    assert main(["simulate", str(bad)]) == 1
    assert main(["loadtest", str(small_config)]) == 1


def test_compare_failure_exit_2(tmp_path, monkeypatch, small_config):
    import predscale.harness as h

    def boom(cfg, lookahead=None):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(h, "run_experiment", boom)
    assert main(["compare", str(small_config), "--models", "hold", "--reps", "1"]) == 2
    assert (small_config.parent / "out" / "comparison.partial.csv").exists()


def test_loadtest_against_stub(tmp_path, stub_server, capsys):
    srv = stub_server(latency=0.0)
    (tmp_path / "t.txt").write_bytes(format_text_trace([TraceEvent(0.0), TraceEvent(0.1)]))
    cfg = {"trace": {"path": "t.txt"}, "mode": "live", "duration": 5, "target": {"url": srv.url}}
    (tmp_path / "live.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["loadtest", str(tmp_path / "live.yaml")]) == 0
    assert "requests=2" in capsys.readouterr().out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "predscale", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("simulate", "loadtest", "score", "trace", "compare", "stub-target"):
        assert cmd in proc.stdout
