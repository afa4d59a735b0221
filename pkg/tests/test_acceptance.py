"""Acceptance criteria, one test per criterion.

Run directly (``python3 tests/test_acceptance.py``) or through pytest; either
way the terminal summary prints one ``criterion N: PASS|FAIL`` line each.
"""

import json
import os
import subprocess
import sys
import time

import mpmath
import numpy as np
import pytest

from memtune import quant
from memtune.autograd import StoragePolicy, Tape, payload_nbytes
from memtune.memory import verify_against_tape
from memtune.model import METHODS, ToyViT, ToyViTConfig

pytestmark = pytest.mark.acceptance

SINGLE_THREAD = {"OMP_NUM_THREADS": "1", "OPENBLAS_NUM_THREADS": "1", "MKL_NUM_THREADS": "1"}


def cli(*argv, cwd=None, env=None):
    full_env = {**os.environ, **SINGLE_THREAD, **(env or {})}
    full_env.pop("MEMTUNE_SEED", None)
    return subprocess.run([sys.executable, "-m", "memtune", *argv], capture_output=True, cwd=cwd, env=full_env)


# ---------------------------------------------------------------------------------------

def test_criterion_01_gradient_correctness():
    start = time.perf_counter()
    proc = cli("gradcheck", "--target", "all", "--seeds", "20", "--tol", "1e-3", "--format", "json")
    elapsed = time.perf_counter() - start
    assert proc.returncode == 0, proc.stderr.decode()
    doc = json.loads(proc.stdout)
    required = {"bias-linear", "lrp", "cap", "lsb", "softmax", "gelu"}
    seen = {r["target"]: r for r in doc["results"]}
    assert required <= set(seen)
    for name in required:
        assert seen[name]["seeds"] >= 20
        assert seen[name]["max_error"] <= 1e-3, name
    assert elapsed < 60, f"gradcheck took {elapsed:.1f}s"


def test_criterion_02_relu_mask_is_lossless():
    rng = np.random.default_rng(2)
    x = rng.normal(size=100_000).astype(np.float32)
    x[::997] = 0.0
    g = rng.normal(size=x.size).astype(np.float32)
    _, blob = quant.relu_forward(x)
    assert blob.bits == 1 and blob.nbytes == 12_500
    assert quant.relu_backward(blob, g).tobytes() == quant.relu_backward(x, g).tobytes()


def _roundtrip_ok(t):
    blob = quant.quantize(t)
    err = np.abs(quant.dequantize(blob).astype(np.float64) - t.astype(np.float64)).max()
    return err <= quant.roundtrip_bound(t, blob)


def test_criterion_03_quantizer_roundtrip():
    rng = np.random.default_rng(3)
    failures = 0
    for i in range(100_000):
        kind = i % 10
        if kind == 0:
            t = np.full(int(rng.integers(1, 9)), rng.normal() * 10 ** rng.uniform(-4, 4), np.float32)
        elif kind == 1:
            t = np.array([rng.normal() * 10 ** rng.uniform(-6, 6)], np.float32)
        else:
            n = int(rng.integers(2, 33))
            t = (rng.normal(size=n) * 10 ** rng.uniform(-6, 6) + rng.normal() * 10 ** rng.uniform(-3, 3))
            t = t.astype(np.float32)
        failures += not _roundtrip_ok(t)
    assert failures == 0


def _mp_gap(x):
    x = mpmath.mpf(x)
    a = mpmath.mpf("1.702")
    s = 1 / (1 + mpmath.exp(-a * x))
    exact = s + a * x * s * (1 - s)
    xc = min(max(x, -2), 2)
    approx = 1 / (1 + mpmath.exp(-a * xc)) + mpmath.mpf("0.22") * mpmath.sin(mpmath.mpf("1.5") * xc)
    return abs(approx - exact)


def test_criterion_04_gelu_gap_constant():
    mpmath.mp.dps = 40
    # coarse scan of [-6, 6] in high precision, then refine around the best point
    coarse = [mpmath.mpf(-6) + mpmath.mpf(12) * i / 2400 for i in range(2401)]
    best = max(coarse, key=_mp_gap)
    fine = [best + mpmath.mpf("0.01") * (i - 500) / 500 for i in range(1001)]
    sup = max(_mp_gap(x) for x in fine if -6 <= x <= 6)
    assert float(sup) == pytest.approx(quant.D_GELU, abs=1e-12)
    grid = np.linspace(-6, 6, 120001)
    assert quant.gelu_gap(grid).max() == pytest.approx(quant.D_GELU, abs=1e-12)
    assert quant.gelu_derivative_exact(0.0) == 0.5
    assert quant.gelu_derivative_approx(0.0) == 0.5


def test_criterion_05_softmax_quantized_backward_bound():
    rng = np.random.default_rng(5)
    for trial in range(300):
        rows, cols = int(rng.integers(1, 65)), int(rng.integers(2, 65))
        x = (rng.normal(size=(2, rows, cols)) * rng.uniform(0.1, 8)).astype(np.float32)
        y = quant.softmax(x)
        assert np.max(np.abs(y.sum(axis=-1) - 1)) <= 1e-6
        blob = quant.quantize(y)
        g = rng.normal(size=y.shape)
        y64 = y.astype(np.float64)
        exact = quant.softmax_backward(y64, g)
        approx = quant.softmax_backward(blob, g)
        y_hat = quant.dequantize(blob, np.float64)
        e = quant.roundtrip_bound(y, blob)
        inner = (g * y64).sum(axis=-1, keepdims=True)
        bound = e * np.abs(g - inner) + np.abs(y_hat) * e * np.abs(g).sum(axis=-1, keepdims=True)
        assert np.all(np.abs(approx - exact) <= bound * (1 + 1e-9) + 1e-15), trial


def test_criterion_06_memory_accounting_vit_b_16():
    mb = {}
    for method in METHODS:
        proc = cli("estimate-mem", "--arch", "vit_b_16", "--batch", "32", "--method", method, "--out", "json")
        assert proc.returncode == 0, proc.stderr.decode()
        mb[method] = json.loads(proc.stdout)["total_mb"]
    assert abs(mb["Full"] - 4099) <= 0.20 * 4099
    assert abs(mb["Linear"] - 344) <= 0.10 * 344
    assert abs(mb["S2A"] - 640) <= 0.30 * 640
    assert mb["Linear"] < mb["S2A"] < mb["LoRA"] < mb["VPT"] < mb["Adapter"] < mb["Full"]
    assert mb["Full"] / mb["S2A"] >= 5


@pytest.mark.parametrize("quantize", [True, False])
def test_criterion_07_dual_path_consistency(quantize):
    for method in METHODS:
        model = ToyViT(ToyViTConfig(method=method, quantize=quantize))
        report = verify_against_tape(model, batch=32)
        assert report.ok, (method, report.mismatches)
        assert report.measured_total > 0


def _train(tmp_path, *flags):
    out = tmp_path / "_".join(f.strip("-") for f in flags)
    start = time.perf_counter()
    proc = cli("train", "--seed", "0", "--out", str(out), *flags)
    elapsed = time.perf_counter() - start
    assert proc.returncode == 0, proc.stderr.decode()
    return json.loads(proc.stdout), elapsed


def test_criterion_08_end_to_end_finetuning(tmp_path):
    linear, t_lin = _train(tmp_path, "--method", "linear")
    s2a_q, t_q = _train(tmp_path, "--method", "s2a", "--quantize", "on")
    s2a_f, t_f = _train(tmp_path, "--method", "s2a", "--quantize", "off")
    print(f"val acc: linear {linear['val_acc']:.3f}  s2a/q4 {s2a_q['val_acc']:.3f}  s2a/fp32 {s2a_f['val_acc']:.3f}")
    assert s2a_q["quantize"] and not s2a_f["quantize"]
    assert s2a_q["val_acc"] - linear["val_acc"] >= 0.02
    assert s2a_q["frozen_unchanged"] and s2a_f["frozen_unchanged"] and linear["frozen_unchanged"]
    assert abs(s2a_q["val_acc"] - s2a_f["val_acc"]) <= 0.02
    assert max(t_lin, t_q, t_f) < 300


def test_criterion_09_quant4_is_one_eighth_of_full32():
    for n in (10_000, 36_992, 208_896, 10**6):
        ratio = payload_nbytes(StoragePolicy.QUANT4, n) / payload_nbytes(StoragePolicy.FULL32, n)
        assert abs(ratio - 0.125) <= 0.01 * 0.125
    x = np.random.default_rng(9).random((32, 16, 16, 1), dtype=np.float32)
    tagged = {}
    for quantize in (True, False):
        tape = Tape()
        ToyViT(ToyViTConfig(method="S2A", quantize=quantize)).forward(tape, x, np.zeros(32, int))
        tagged[quantize] = {n.tag: n for n in tape.nodes if n.op_kind in ("softmax", "gelu")}
    assert tagged[True]
    for tag, node in tagged[True].items():
        full = tagged[False][tag]
        assert node.saved.policy is StoragePolicy.QUANT4 and full.saved.policy is StoragePolicy.FULL32
        assert int(np.prod(node.output_shape)) >= 10_000
        assert abs(node.saved.nbytes / full.saved.nbytes - 0.125) <= 0.01 * 0.125, tag


def test_criterion_10_cli_determinism(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"total_epochs": 2, "warmup_epochs": 1},
                               "model": {"depth": 2, "d_model": 32, "n_heads": 4, "lrp_rank": 3},
                               "data": {"n": 80}}))
    commands = [
        ["gradcheck", "--target", "all", "--seed", "4", "--format", "json"],
        ["estimate-mem", "--arch", "vit_b_16", "--method", "s2a", "--out", "json", "--layers"],
        ["estimate-mem", "--arch", "toy_vit", "--method", "vpt", "--out", "table"],
        ["compare-methods", "--out", "json"],
        ["quant-report", "--grid-points", "2001"],
        ["train", "--config", str(cfg), "--method", "s2a", "--seed", "1", "--out", "run"],
    ]
    for argv in commands:
        outputs = []
        for rep in ("a", "b"):
            work = tmp_path / rep
            work.mkdir(exist_ok=True)
            proc = cli(*argv, cwd=work)
            assert proc.returncode == 0, (argv, proc.stderr.decode())
            files = {}
            if argv[0] == "train":
                files = {f: (work / "run" / f).read_bytes() for f in ("metrics.jsonl", "summary.json")}
            outputs.append((proc.stdout, files))
        assert outputs[0] == outputs[1], argv


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", *sys.argv[1:]]))
