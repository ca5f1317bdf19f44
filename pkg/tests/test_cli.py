import csv
import subprocess
import sys

import pytest

from qdk.cli import EVAL_COLUMNS, LATENCY_COLUMNS, SUMMARY_COLUMNS, main

FAST = """\
seed: 0
bits: {weights: 4, activations: 8}
calibration_samples: 8
eval_samples: 8
reconstruction: {iterations: 40}
network: {width: 16, depth: 1, decoder_outlier_channels: 2}
simulate: {workload: vit, resolutions: [64, 128], fusion: true}
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(FAST)
    return p


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(*argv):
    return main([str(a) for a in argv])


def chain(cfg, out, *extra):
    for cmd in ("calibrate", "quantize", "eval", "simulate", "report"):
        assert run(cmd, "--config", cfg, "--out", out, *extra) == 0, cmd


def test_full_chain(cfg, tmp_path):
    out = tmp_path / "a"
    chain(cfg, out)
    assert sorted(p.name for p in out.iterdir()) == [
        "calibration.json", "eval.csv", "latency.csv", "model.qrtd", "summary.csv", "trace_w4a8.csv"]
    ev = rows(out / "eval.csv")
    assert tuple(ev[0]) == EVAL_COLUMNS
    assert [r["model"] for r in ev] == ["float", "quantized"]
    assert float(ev[0]["absrel"]) == 0.0 and float(ev[1]["absrel"]) > 0
    lat = rows(out / "latency.csv")
    assert tuple(lat[0]) == LATENCY_COLUMNS
    assert [(r["precision"], r["resolution"]) for r in lat] == [
        ("fp32", "64"), ("w4a8", "64"), ("fp32", "128"), ("w4a8", "128")]
    summary = rows(out / "summary.csv")
    assert tuple(summary[0]) == SUMMARY_COLUMNS
    assert len(summary) == 1 and summary[0]["precision"] == "w4a8"
    assert summary[0]["absrel"] == ev[1]["absrel"] and summary[0]["resolution"] == "64"


def test_deterministic(cfg, tmp_path):
    for d in ("a", "b"):
        for cmd in ("quantize", "simulate", "report"):
            assert run(cmd, "--config", cfg, "--out", tmp_path / d) == 0
    for name in ("latency.csv", "summary.csv", "trace_w4a8.csv", "model.qrtd"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_float_model_against_itself(cfg, tmp_path):
    out = tmp_path / "f"
    assert run("quantize", "--config", cfg, "--out", out, "--precision", "fp32") == 0
    assert run("eval", "--config", cfg, "--out", out) == 0
    q = rows(out / "eval.csv")[1]
    assert q["method"] == "float" and float(q["absrel"]) == 0.0


def test_report_joins_runs(cfg, tmp_path):
    a, b = tmp_path / "w4a8", tmp_path / "w4a4"
    assert run("quantize", "--config", cfg, "--out", a) == 0
    assert run("quantize", "--config", cfg, "--out", b, "--precision", "w4a4", "--method", "minmax") == 0
    assert run("report", "--config", cfg, "--out", tmp_path / "rep", "--runs", a, b) == 0
    summary = rows(tmp_path / "rep" / "summary.csv")
    assert [(r["precision"], r["method"]) for r in summary] == [("w4a4", "minmax"), ("w4a8", "full")]
    assert all(r["total_ms"] == "" for r in summary)        # no latency.csv in those runs


def test_calibration_is_reused(cfg, tmp_path, caplog):
    out = tmp_path / "c"
    assert run("calibrate", "--config", cfg, "--out", out) == 0
    assert run("quantize", "--config", cfg, "--out", out) == 0
    fresh = tmp_path / "d"
    assert run("quantize", "--config", cfg, "--out", fresh) == 0
    assert (out / "model.qrtd").read_bytes() == (fresh / "model.qrtd").read_bytes()


def test_fusion_flag(cfg, tmp_path):
    assert run("simulate", "--config", cfg, "--out", tmp_path / "on") == 0
    assert run("simulate", "--config", cfg, "--out", tmp_path / "off", "--fusion", "off") == 0
    on = rows(tmp_path / "on" / "latency.csv")
    off = rows(tmp_path / "off" / "latency.csv")
    assert all(r["fusion"] == "off" for r in off)
    assert all(int(a["makespan_cycles"]) <= int(b["makespan_cycles"]) for a, b in zip(on, off))


def test_missing_config(tmp_path, capsys):
    assert run("quantize", "--config", tmp_path / "nope.yaml", "--out", tmp_path / "o") == 2
    err = capsys.readouterr().err
    assert "qdk quantize: error in qdk.config" in err and "not found" in err
    assert not (tmp_path / "o").exists()


def test_invalid_config(tmp_path, capsys):
    (tmp_path / "bad.yaml").write_text("bits: {weights: 99}\n")
    assert run("simulate", "--config", tmp_path / "bad.yaml", "--out", tmp_path / "o") == 2
    assert "bits.weights" in capsys.readouterr().err


def test_eval_without_model_writes_nothing(cfg, tmp_path, capsys):
    out = tmp_path / "e"
    assert run("eval", "--config", cfg, "--out", out) == 2
    assert "qdk quantize" in capsys.readouterr().err
    assert not (out / "eval.csv").exists()


def test_lower_module_errors_carry_context(cfg, tmp_path, capsys):
    out = tmp_path / "x"
    out.mkdir()
    (out / "model.qrtd").write_bytes(b"garbage")
    assert run("eval", "--config", cfg, "--out", out) == 2
    assert "error in qdk.modelfile" in capsys.readouterr().err
    assert sorted(p.name for p in out.iterdir()) == ["model.qrtd"]


def test_calibrate_float_is_an_error(cfg, tmp_path):
    assert run("calibrate", "--config", cfg, "--out", tmp_path / "z", "--precision", "fp32") == 2
    assert not (tmp_path / "z").exists()


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "qdk.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "calibrate" in res.stdout
    res = subprocess.run([sys.executable, "-m", "qdk.cli", "frobnicate"], capture_output=True, text=True)
    assert res.returncode == 2
