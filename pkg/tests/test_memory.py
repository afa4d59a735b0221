import json

import pytest

from memtune.autograd import StoragePolicy, payload_nbytes
from memtune.memory import (
    PROFILES,
    LayerSpec,
    ModelSpec,
    build_model_spec,
    estimate,
    estimate_method,
    spec_from_json,
    verify_against_tape,
)
from memtune.model import METHODS, ConfigError, ToyViT, ToyViTConfig

SMALL = dict(depth=2, d_model=32, n_heads=4, lrp_rank=3, vpt_tokens=5)


def vit_params_by_hand():
    c, n, h, mlp, depth, classes, patch = 768, 197, 12, 3072, 12, 100, 768
    block = 2 * c + (3 * c * c + 3 * c) + (c * c + c) + 2 * c + (c * mlp + mlp) + (mlp * c + c)
    return patch * c + c + c + n * c + depth * block + 2 * c + c * classes + classes


def test_vit_b_16_parameter_anchor():
    report = estimate_method("vit_b_16", "Full", 32)
    assert report.total_params == vit_params_by_hand()
    assert 85e6 < report.total_params < 87e6


def test_toy_depth_two_has_two_softmax_layers():
    spec = build_model_spec(ToyViTConfig(depth=2), 4)
    assert sum(l.kind == "attention-softmax" for l in spec.layers) == 2


@pytest.mark.parametrize("method", METHODS)
def test_elements_linear_in_batch(method):
    for arch in ("vit_b_16", ToyViTConfig(method=method)):
        a = build_model_spec(arch, 3, method if arch == "vit_b_16" else None)
        b = build_model_spec(arch, 6, method if arch == "vit_b_16" else None)
        for la, lb in zip(a.layers, b.layers):
            assert lb.activation_elements(6) == 2 * la.activation_elements(3)


def test_unknown_arch_and_bad_batch():
    with pytest.raises(ConfigError):
        build_model_spec("resnet50", 32)
    with pytest.raises(ConfigError):
        build_model_spec("vit_b_16", 0)


def test_total_is_sum_of_parts():
    for m in METHODS:
        r = estimate_method("vit_b_16", m, 32)
        assert r.total_bytes == (r.weight_bytes + r.gradient_bytes + r.optimizer_bytes
                                 + r.activation_bytes + r.quant_overhead_bytes)
        assert r.optimizer_bytes == 2 * r.gradient_bytes == 8 * r.trainable_params


def test_vit_b_16_method_targets():
    reports = {m: estimate_method("vit_b_16", m, 32) for m in METHODS}
    assert abs(reports["Full"].total_mb - 4099) <= 0.20 * 4099
    assert abs(reports["Linear"].total_mb - 344) <= 0.10 * 344
    assert abs(reports["S2A"].total_mb - 640) <= 0.30 * 640
    assert reports["Full"].total_mb / reports["S2A"].total_mb >= 5
    order = ["Linear", "S2A", "LoRA", "VPT", "Adapter", "Full"]
    mb = [reports[m].total_mb for m in order]
    assert mb == sorted(mb) and len(set(mb)) == len(mb)


def test_s2a_trainable_fraction_near_one_percent():
    r = estimate_method("vit_b_16", "S2A", 32)
    assert 0.5 < r.trainable_percent < 1.5


def test_linear_is_weights_plus_head_extras():
    r = estimate_method("vit_b_16", "Linear", 32)
    head = 4 * 32 * 768
    assert r.activation_bytes == head
    assert r.total_bytes == r.weight_bytes + 12 * r.trainable_params + head


def test_batch_doubles_activation_bytes_exactly():
    for m in METHODS:
        a, b = estimate_method("vit_b_16", m, 32), estimate_method("vit_b_16", m, 64)
        assert b.activation_bytes == 2 * a.activation_bytes
        assert b.aux_activation_bytes == 2 * a.aux_activation_bytes
        assert (b.weight_bytes, b.gradient_bytes, b.optimizer_bytes) == (a.weight_bytes, a.gradient_bytes, a.optimizer_bytes)


def test_quant4_ratio_tends_to_one_eighth():
    for n in (10_000, 123_457, 10**7):
        ratio = payload_nbytes(StoragePolicy.QUANT4, n) / payload_nbytes(StoragePolicy.FULL32, n)
        assert abs(ratio - 1 / 8) <= 0.01 / 8
    full = estimate_method("vit_b_16", "S2A", 32, quantize=False)
    quant = estimate_method("vit_b_16", "S2A", 32, quantize=True)
    for rf, rq in zip(full.rows, quant.rows):
        if rq.policy == "Quant4":
            assert abs((rq.activation_bytes + rq.quant_overhead_bytes) / rf.activation_bytes - 1 / 8) <= 0.01 / 8


def test_adding_trainable_layer_never_decreases_total():
    spec = build_model_spec("vit_b_16", 32, "S2A")
    base = estimate(spec).total_bytes
    extra = LayerSpec("extra", "linear", 197 * 768, 768 * 768, 768 * 768, StoragePolicy.FULL32)
    bigger = ModelSpec(spec.arch, spec.batch, spec.profile, spec.layers + [extra])
    assert estimate(bigger).total_bytes > base


def test_layer_spec_validation():
    with pytest.raises(ConfigError):
        LayerSpec("x", "teleport", 4, 0, 0, StoragePolicy.NOSAVE)
    with pytest.raises(ConfigError):
        LayerSpec("x", "linear", 0, 0, 0, StoragePolicy.NOSAVE)


def test_profile_mismatch_rejected():
    with pytest.raises(ConfigError):
        estimate(build_model_spec("vit_b_16", 32, "S2A"), PROFILES["Full"])


def test_json_roundtrip():
    spec = build_model_spec("vit_b_16", 32, "LoRA")
    back = spec_from_json(json.dumps(spec.to_dict()))
    assert estimate(back).total_bytes == estimate(spec).total_bytes
    doc = json.loads(estimate(spec).to_json())
    assert doc["total_bytes"] == estimate(spec).total_bytes
    with pytest.raises(ConfigError, match="line"):
        spec_from_json("{\n  'bad': 1\n}")


def test_table_layout():
    text = estimate_method("vit_b_16", "S2A", 32).to_table()
    header = text.splitlines()[0].split()
    assert header[:2] == ["Method", "Params"]
    assert "S2A" in text.splitlines()[1]


@pytest.mark.parametrize("method", METHODS)
@pytest.mark.parametrize("quantize", [None, True, False])
def test_dual_path_zero_discrepancy(method, quantize):
    cfg = ToyViTConfig(method=method, quantize=quantize, **SMALL)
    report = verify_against_tape(ToyViT(cfg), batch=3)
    assert report.ok, report.mismatches


def test_mistagged_policy_is_flagged_at_that_layer():
    cfg = ToyViTConfig(method="S2A", **SMALL)
    spec = build_model_spec(cfg, 3)
    target = next(l for l in spec.layers if l.name == "blocks.1.mlp.gelu")
    target.save_policy = StoragePolicy.FULL32
    report = verify_against_tape(ToyViT(cfg), spec=spec)
    assert not report.ok
    assert [d.name for d in report.mismatches] == ["blocks.1.mlp.gelu"]
