import csv
import io
import json
import subprocess
import sys

import pytest

from memtune.cli import main
from memtune.quant import D_GELU

SMALL_MODEL = {"depth": 2, "d_model": 32, "n_heads": 4, "lrp_rank": 3, "vpt_tokens": 5}


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_unknown_target_and_flag_are_usage_errors(capsys):
    assert run(capsys, "gradcheck", "--target", "conv7")[0] == 2
    assert run(capsys, "estimate-mem", "--bogus")[0] == 2
    assert run(capsys, "estimate-mem", "--method", "dora")[0] == 2
    assert run(capsys, "quant-report", "--grid-points", "1")[0] == 2
    assert run(capsys)[0] == 2


def test_gradcheck_cap_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--target", "cap", "--format", "json")
    assert code == 0
    doc = json.loads(out)
    assert doc["results"][0]["target"] == "cap" and doc["results"][0]["seeds"] == 20
    assert doc["results"][0]["max_error"] <= 1e-3


def test_gradcheck_impossible_tolerance_fails_and_names_ops(capsys):
    code, out, err = run(capsys, "gradcheck", "--target", "all", "--tol", "1e-12", "--seeds", "2")
    assert code == 1
    assert "gelu" in err and "softmax" in err
    assert "FAIL" in out


def test_estimate_mem_json(capsys):
    code, out, _ = run(capsys, "estimate-mem", "--arch", "vit_b_16", "--method", "full", "--out", "json")
    assert code == 0
    doc = json.loads(out)
    assert doc["method"] == "Full"
    assert abs(doc["total_mb"] - 4099) <= 0.2 * 4099


def test_estimate_mem_batch_linearity(capsys):
    docs = []
    for batch in ("32", "64"):
        code, out, _ = run(capsys, "estimate-mem", "--method", "s2a", "--batch", batch, "--out", "json")
        assert code == 0
        docs.append(json.loads(out))
    assert docs[1]["activation_bytes"] == 2 * docs[0]["activation_bytes"]


def test_estimate_mem_table_columns(capsys):
    _, out, _ = run(capsys, "estimate-mem", "--method", "linear")
    assert out.splitlines()[0].split() == ["Method", "Params", "%", "Memory", "MB"]
    mb = float(out.splitlines()[1].split()[-1])
    assert abs(mb - 344) <= 0.1 * 344


def test_compare_methods_json_is_ordered(capsys):
    _, out, _ = run(capsys, "compare-methods", "--out", "json")
    mb = {m["method"]: m["total_mb"] for m in json.loads(out)["methods"]}
    assert mb["Linear"] < mb["S2A"] < mb["LoRA"] < mb["VPT"] < mb["Adapter"] < mb["Full"]


def test_estimate_toy_arch_with_config(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": SMALL_MODEL}))
    code, out, _ = run(capsys, "estimate-mem", "--arch", "toy_vit", "--config", str(cfg), "--out", "json")
    assert code == 0
    assert json.loads(out)["arch"] == "toy_vit"


def test_quant_report_csv(tmp_path, capsys):
    path = tmp_path / "g.csv"
    code, _, err = run(capsys, "quant-report", "--output", str(path))
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(path.read_text())))
    assert len(rows) == 120001
    xs = [float(r["x"]) for r in rows]
    assert all(a < b for a, b in zip(xs, xs[1:]))
    mid = rows[60000]
    assert float(mid["x"]) == 0.0 and float(mid["exact"]) == 0.5 and float(mid["approx"]) == 0.5
    gap = max(float(r["gap"]) for r in rows)
    assert gap == pytest.approx(D_GELU, abs=1e-12)
    assert "max gap" in err


def write_config(tmp_path, **train):
    cfg = tmp_path / "train.json"
    doc = {"train": {"total_epochs": 1, "warmup_epochs": 0, **train}, "model": SMALL_MODEL, "data": {"n": 60}}
    cfg.write_text(json.dumps(doc, indent=2))
    return cfg


def test_train_writes_metrics_and_is_deterministic(tmp_path, capsys):
    cfg = write_config(tmp_path)
    outs = []
    for name in ("a", "b"):
        code, out, _ = run(capsys, "train", "--config", str(cfg), "--method", "s2a", "--seed", "3",
                           "--out", str(tmp_path / name))
        assert code == 0
        outs.append(out)
    assert outs[0] == outs[1]
    summary = json.loads(outs[0])
    assert summary["seed"] == 3 and summary["method"] == "S2A"
    for f in ("metrics.jsonl", "summary.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_quantize_flag_changes_measured_bytes(tmp_path, capsys):
    cfg = write_config(tmp_path)
    measured = {}
    for flag in ("on", "off"):
        code, out, _ = run(capsys, "train", "--config", str(cfg), "--quantize", flag, "--out", str(tmp_path / flag))
        assert code == 0
        doc = json.loads(out)
        assert doc["measured_activation_bytes"] == doc["predicted_activation_bytes"]
        measured[flag] = doc["measured_activation_bytes"]
    assert measured["on"] < measured["off"]


def test_s2a_on_default_toy_trains_under_two_percent(tmp_path, capsys):
    cfg = tmp_path / "t.json"
    cfg.write_text(json.dumps({"train": {"total_epochs": 1, "warmup_epochs": 0}, "data": {"n": 40}}))
    code, out, _ = run(capsys, "train", "--config", str(cfg), "--method", "s2a", "--out", str(tmp_path / "o"))
    assert code == 0
    assert json.loads(out)["trainable_fraction"] < 0.02


def test_config_parse_error_has_line_number(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{\n  "train": {\n    "lr": 0.1,\n  }\n}\n')
    code, _, err = run(capsys, "train", "--config", str(cfg))
    assert code == 2
    assert "line 4" in err


def test_config_unknown_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"train": {"learning_rate": 0.1}}))
    code, _, err = run(capsys, "train", "--config", str(cfg))
    assert code == 2 and "learning_rate" in err


def test_seed_environment_variable(tmp_path, capsys, monkeypatch):
    cfg = write_config(tmp_path)
    monkeypatch.setenv("MEMTUNE_SEED", "5")
    _, out, _ = run(capsys, "train", "--config", str(cfg), "--out", str(tmp_path / "e"))
    assert json.loads(out)["seed"] == 5
    monkeypatch.setenv("MEMTUNE_SEED", "five")
    assert run(capsys, "train", "--config", str(cfg), "--out", str(tmp_path / "f"))[0] == 2


def test_console_entry_point_runs_as_module():
    proc = subprocess.run([sys.executable, "-m", "memtune", "estimate-mem", "--method", "linear", "--out", "json"],
                          capture_output=True, text=True, check=True)
    assert json.loads(proc.stdout)["method"] == "Linear"
