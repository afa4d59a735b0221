"""Finite-difference suites behind ``memtune gradcheck``.

Each case draws a small random instance, builds ``sum(f(params) * R)`` for a
fixed random ``R`` (so every output element contributes with its own
weight), and compares tape gradients with central differences in float64.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import finite_diff_check

TARGETS = ("bias-linear", "lrp", "cap", "lsb", "softmax", "gelu", "relu")


def _weighted(tape, y, r):
    return ops.sum_all(ops.mul_const(y, r))


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.sign(x) * (np.abs(x) + gap)


def case_bias_linear(rng):
    b, n, d_in, d_out = 3, int(rng.integers(2, 6)), int(rng.integers(2, 9)), int(rng.integers(2, 9))
    w = rng.normal(size=(d_in, d_out))
    r = rng.normal(size=(b, n, d_out))

    def model(tape, p):
        wv = tape.leaf(w)  # frozen
        return _weighted(tape, ops.linear(p["x"], wv, p["b"]), r)

    return model, {"x": rng.normal(size=(b, n, d_in)), "b": rng.normal(size=d_out)}


def case_lrp(rng):
    n, c, rank = 8, int(rng.integers(4, 10)), int(rng.integers(1, 4))
    r = rng.normal(size=(2, n, c))

    def model(tape, p):
        return _weighted(tape, ops.lrp(p["x"], p["A"], p["B"]), r)

    return model, {"x": rng.normal(size=(2, n, c)), "A": rng.normal(size=(n, rank)), "B": rng.normal(size=(rank, c))}


def case_cap(rng):
    factor = int(rng.choice([1, 2, 4]))
    c = factor * int(rng.integers(1, 5))
    r = rng.normal(size=(2, 5, c // factor))

    def model(tape, p):
        return _weighted(tape, ops.cap(p["x"], factor), r)

    return model, {"x": rng.normal(size=(2, 5, c))}


def case_lsb(rng):
    g, c = int(rng.integers(1, 4)), int(rng.integers(1, 5))
    r = rng.normal(size=(2, g, g, c))

    def model(tape, p):
        h = ops.pointwise_conv(ops.add(p["x"], p["y_prev"]), p["w1"], p["b1"])
        h = ops.depthwise_conv(h, p["k"], p["kb"])
        return _weighted(tape, ops.pointwise_conv(h, p["w2"], p["b2"]), r)

    params = {"x": rng.normal(size=(2, g, g, c)), "y_prev": rng.normal(size=(2, g, g, c)),
              "w1": rng.normal(size=(c, c)), "b1": rng.normal(size=c),
              "k": rng.normal(size=(3, 3, c)), "kb": rng.normal(size=c),
              "w2": rng.normal(size=(c, c)), "b2": rng.normal(size=c)}
    return model, params


def case_softmax(rng):
    shape = (2, int(rng.integers(2, 6)), int(rng.integers(2, 9)))
    r = rng.normal(size=shape)

    def model(tape, p):
        return _weighted(tape, ops.softmax(p["x"], quantize=False), r)

    return model, {"x": 2.0 * rng.normal(size=shape)}


def case_gelu(rng):
    shape = (3, int(rng.integers(2, 9)))
    r = rng.normal(size=shape)

    def model(tape, p):
        return _weighted(tape, ops.gelu(p["x"], quantize=False), r)

    return model, {"x": 2.0 * rng.normal(size=shape)}


def case_relu(rng):
    shape = (3, int(rng.integers(2, 9)))
    r = rng.normal(size=shape)

    def model(tape, p):
        return _weighted(tape, ops.relu(p["x"], quantize=False), r)

    return model, {"x": _away_from_zero(rng, shape)}


CASES = {
    "bias-linear": case_bias_linear, "lrp": case_lrp, "cap": case_cap, "lsb": case_lsb,
    "softmax": case_softmax, "gelu": case_gelu, "relu": case_relu,
}


@dataclass
class GradcheckResult:
    target: str
    max_error: float
    seeds: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def run_target(target, seed=0, n_seeds=20, tol=1e-3, h=1e-3) -> GradcheckResult:
    if target not in CASES:
        raise KeyError(target)
    worst = 0.0
    for k in range(n_seeds):
        rng = np.random.default_rng([seed, k, TARGETS.index(target)])
        model, params = CASES[target](rng)
        worst = max(worst, finite_diff_check(model, params, h=h))
    return GradcheckResult(target, worst, n_seeds, tol)


def run_suite(target="all", seed=0, n_seeds=20, tol=1e-3) -> list:
    targets = TARGETS if target == "all" else (target,)
    return [run_target(t, seed, n_seeds, tol) for t in targets]


def format_results(results) -> str:
    lines = [f"{'target':<12} {'seeds':>5} {'max_rel_error':>14}  status"]
    for r in results:
        lines.append(f"{r.target:<12} {r.seeds:>5} {r.max_error:>14.3e}  {'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)
