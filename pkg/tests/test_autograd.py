import numpy as np
import pytest

from memtune import ops
from memtune.autograd import (
    ContractError,
    CorruptedTapeError,
    RegistrationError,
    SavedActivation,
    StoragePolicy,
    Tape,
    TapeError,
    finite_diff_check,
    gradient_errors,
    live_activation_bytes,
    payload_nbytes,
)
from memtune.quant import NumericError, quantize, quantize_mask


def test_record_ids_are_monotone():
    tape = Tape()
    assert tape.leaf(np.zeros(2)).id == 0
    assert tape.leaf(np.zeros(2)).id == 1


def test_parent_must_already_exist():
    tape = Tape()
    tape.leaf(np.zeros(2))
    with pytest.raises(TapeError):
        tape.record("add", [0, 1], None, np.zeros(2))


def test_unknown_op_kind():
    with pytest.raises(RegistrationError):
        Tape().record("teleport", [], None, np.zeros(1))


def test_policy_must_match_registration():
    tape = Tape()
    x = tape.leaf(np.ones(4), requires_grad=True)
    with pytest.raises(TapeError):
        tape.record("cap", [x.id], SavedActivation.full(x=x.value), np.ones(2))
    with pytest.raises(TapeError):
        SavedActivation(StoragePolicy.QUANT4, {"y": np.ones(3)})


def test_frozen_linear_stores_no_payload():
    tape = Tape()
    x = tape.leaf(np.ones((3, 4)), requires_grad=True)
    w = tape.leaf(np.ones((4, 2)))
    b = tape.leaf(np.zeros(2), requires_grad=True)
    y = ops.linear(x, w, b)
    assert y.node.saved.policy is StoragePolicy.NOSAVE
    assert y.node.saved.payload == {}
    assert live_activation_bytes(tape) == 0


def test_sum_gives_ones():
    tape = Tape()
    x = tape.leaf(np.arange(6.0).reshape(2, 3), requires_grad=True)
    grads = tape.backward(ops.sum_all(x))
    assert np.array_equal(grads.of(x), np.ones((2, 3)))


def test_bias_only_linear_gradients():
    rng = np.random.default_rng(0)
    tape = Tape()
    x = tape.leaf(rng.normal(size=(5, 3)))
    w = tape.leaf(rng.normal(size=(3, 4)))
    b = tape.leaf(rng.normal(size=4), requires_grad=True)
    grads = tape.backward(ops.sum_all(ops.linear(x, w, b)))
    assert np.array_equal(grads.of(b), np.full(4, 5.0))
    assert grads.of(w) is None and grads.of(x) is None


def test_frozen_subgraph_is_skipped():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    frozen = ops.scale(x, 2.0)
    assert not frozen.requires_grad
    p = tape.leaf(np.ones(3), requires_grad=True)
    grads = tape.backward(ops.sum_all(ops.add(frozen, p)))
    assert frozen.id not in grads and x.id not in grads


def test_fan_out_accumulates():
    tape = Tape()
    x = tape.leaf(np.array([1.0, 2.0]), requires_grad=True)
    y = ops.add(ops.scale(x, 3.0), ops.scale(x, 4.0))
    assert tape.backward(ops.sum_all(y)).of(x).tolist() == [7.0, 7.0]


def test_nonscalar_loss_rejected():
    tape = Tape()
    x = tape.leaf(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        tape.backward(ops.scale(x, 1.0))


def test_missing_saved_state_is_corruption():
    tape = Tape()
    x = tape.leaf(np.ones((2, 3)), requires_grad=True)
    y = ops.softmax(x)
    y.node.saved = SavedActivation(StoragePolicy.FULL32, {})
    with pytest.raises(CorruptedTapeError):
        tape.backward(ops.sum_all(ops.mul_const(y, np.arange(3.0))))


def test_live_bytes_formulas():
    assert payload_nbytes(StoragePolicy.FULL32, 100) == 400
    assert payload_nbytes(StoragePolicy.QUANT4, 100) == 58
    assert payload_nbytes(StoragePolicy.MASK1, 100) == 13
    assert payload_nbytes(StoragePolicy.NOSAVE, 100) == 0
    rng = np.random.default_rng(0)
    for policy, saved, expected in (
        (StoragePolicy.FULL32, SavedActivation.full(y=np.ones(100, np.float32)), 400),
        (StoragePolicy.QUANT4, SavedActivation.blob("y", quantize(rng.random(100))), 58),
        (StoragePolicy.MASK1, SavedActivation.blob("x", quantize_mask(rng.random(100) > 0.5)), 13),
    ):
        tape = Tape()
        x = tape.leaf(np.ones(100), requires_grad=True)
        kind = {StoragePolicy.FULL32: "softmax", StoragePolicy.QUANT4: "softmax", StoragePolicy.MASK1: "relu"}[policy]
        tape.record(kind, [x.id], saved, np.ones(100))
        assert tape.live_activation_bytes() == expected


def test_three_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(4)
    r = rng.normal(size=(6, 3))
    params = {"x": rng.normal(size=(6, 5)),
              "w1": rng.normal(size=(5, 8)) * 0.5, "b1": rng.normal(size=8),
              "w2": rng.normal(size=(8, 8)) * 0.5, "b2": rng.normal(size=8),
              "w3": rng.normal(size=(8, 3)) * 0.5, "b3": rng.normal(size=3)}

    def mlp(tape, p):
        h = ops.gelu(ops.linear(p["x"], p["w1"], p["b1"]))
        h = ops.gelu(ops.linear(h, p["w2"], p["b2"]))
        return ops.sum_all(ops.mul_const(ops.linear(h, p["w3"], p["b3"]), r))

    assert finite_diff_check(mlp, params, select=[k for k in params if k != "x"]) <= 1e-3


def test_linear_regression_check():
    rng = np.random.default_rng(1)
    x, t = rng.normal(size=(10, 3)), rng.normal(size=(10, 1))

    def loss(tape, p):
        err = ops.add(ops.linear(tape.leaf(x), p["w"], p["b"]), tape.leaf(-t))
        return ops.scale(ops.sum_all(ops.mul(err, err)), 0.5)

    assert finite_diff_check(loss, {"w": rng.normal(size=(3, 1)), "b": rng.normal(size=1)}) <= 1e-4


def test_mul_gradients():
    rng = np.random.default_rng(2)

    def model(tape, p):
        return ops.sum_all(ops.mul_const(ops.mul(p["a"], p["b"]), np.arange(12.0).reshape(3, 4)))

    assert finite_diff_check(model, {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(1, 4))}) <= 1e-6


def test_corrupted_gradient_is_caught():
    from memtune.autograd import OPS, register_op

    def model(tape, p):
        return ops.sum_all(ops.mul_const(ops.scale(p["x"], 1.0), np.array([1.0, -2.0, 3.0])))

    params = {"x": np.array([0.3, -0.7, 1.1])}
    original = OPS["scale"]
    register_op("scale", original.policies, lambda node, g, needs, tape: [2.0 * g])
    try:
        assert finite_diff_check(model, params) == pytest.approx(1.0, abs=1e-6)
    finally:
        OPS["scale"] = original


def test_unused_parameter_has_zero_error():
    def model(tape, p):
        return ops.sum_all(p["used"])

    errs = gradient_errors(model, {"used": np.ones(2), "unused": np.ones(3)})
    assert errs["unused"] <= 1e-8


def test_nonfinite_loss_raises():
    def model(tape, p):
        return ops.sum_all(ops.mul_const(p["x"], np.array([np.inf])))

    with pytest.raises(NumericError):
        finite_diff_check(model, {"x": np.ones(1)})


def test_bad_step_size():
    with pytest.raises(ValueError):
        finite_diff_check(lambda t, p: ops.sum_all(p["x"]), {"x": np.ones(1)}, h=0)


def test_policy_economy_ratio():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 6, 8)).astype(np.float32)

    def record(w_trains):
        tape = Tape()
        xv = tape.leaf(x)
        w = tape.leaf(rng.normal(size=(8, 8)).astype(np.float32), requires_grad=w_trains)
        b = tape.leaf(np.zeros(8, np.float32), requires_grad=True)
        ops.linear(xv, w, b)
        return tape.live_activation_bytes()

    assert record(False) == 0
    assert record(True) == 4 * x.size
