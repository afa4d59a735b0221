"""AdamW, warmup-cosine schedule and the fine-tuning loop."""

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autograd import Tape
from .memory import build_model_spec, estimate
from .model import Binder, ConfigError, ToyViT, ToyViTConfig, backbone_names, canonical_method
from .quant import NumericError


class DivergenceError(NumericError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    method: str = "S2A"
    lr: float = 3e-3
    weight_decay: float = 0.05
    batch: int = 32
    warmup_epochs: int = 2
    total_epochs: int = 20
    seed: int = 0
    quantize: bool | None = None
    model: ToyViTConfig = field(default_factory=ToyViTConfig)

    def __post_init__(self):
        object.__setattr__(self, "method", canonical_method(self.method))
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ConfigError(f"need 0 <= warmup_epochs <= total_epochs, got {self.warmup_epochs}, {self.total_epochs}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")

    def model_config(self, n_classes=None) -> ToyViTConfig:
        cfg = self.model.with_method(self.method, self.quantize)
        if n_classes is not None and n_classes != cfg.n_classes:
            cfg = replace(cfg, n_classes=n_classes)
        return cfg


def cosine_schedule(step, warmup_steps, total_steps, base_lr):
    """Linear ramp to ``base_lr`` over warmup, then half-cosine decay to 0."""
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state: AdamState, lr, wd, beta1=0.9, beta2=0.999, eps=1e-8):
    """One decoupled-weight-decay Adam update, in place.

    ``params`` maps names to ``Parameter``; only trainable ones are touched,
    and weight decay applies only where ``decay`` is set.
    """
    live = {k: p for k, p in params.items() if p.trainable}
    for name in live:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name} at optimizer step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in live.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.value)
        m = state.m.get(name, 0.0) * beta1 + (1.0 - beta1) * g
        v = state.v.get(name, 0.0) * beta2 + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        value = p.value
        if p.decay and wd:
            value = value - lr * wd * value
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.value = (value - update).astype(p.value.dtype, copy=False)
    return params, state


# --- loop --------------------------------------------------------------------------

def _batches(n, batch, rng):
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def evaluate(model, images, labels, batch=256):
    if len(labels) == 0:
        return float("nan")
    pred = model.predict(images, batch=batch).argmax(axis=-1)
    return float((pred == labels).mean())


def _fingerprint(arrays) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name]).tobytes())
    return h.hexdigest()


@dataclass
class FinetuneResult:
    history: list
    summary: dict
    report: object
    model: ToyViT


def run_finetune(config: TrainConfig, dataset, pretrained=None, log=None) -> FinetuneResult:
    """Fine-tune a toy ViT on ``dataset``'s train split.

    ``pretrained`` is a name -> array map of backbone weights; without it the
    seeded initialisation stands in. The run is a pure function of its
    inputs: data order and init draws all come from ``config.seed``.
    """
    cfg = config.model_config(dataset.n_classes)
    model = ToyViT(cfg, pretrained)
    frozen = {k: p.value.copy() for k, p in model.params.items() if not p.trainable}
    frozen_before = _fingerprint(frozen)

    x_tr, y_tr = dataset.split("train")
    x_va, y_va = dataset.split("val")
    x_te, y_te = dataset.split("test")
    if len(y_tr) == 0:
        raise ConfigError("training split is empty")
    steps_per_epoch = math.ceil(len(y_tr) / config.batch)
    total_steps = steps_per_epoch * config.total_epochs
    warmup_steps = steps_per_epoch * config.warmup_epochs

    spec_batch = min(config.batch, len(y_tr))
    report = estimate(build_model_spec(cfg, spec_batch))
    predicted = sum(report.predicted_tape_bytes().values())
    measured = None

    rng = np.random.default_rng(config.seed)
    state = AdamState()
    history = []
    step = 0
    for epoch in range(config.total_epochs):
        losses, correct = [], 0
        for idx in _batches(len(y_tr), config.batch, rng):
            tape = Tape()
            bind = Binder(tape, model.params)
            logits, loss = model.forward(tape, x_tr[idx], y_tr[idx], bind=bind)
            value = float(loss.value)
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} at step {step}")
            if measured is None and len(idx) == spec_batch:
                measured = tape.live_activation_bytes()
            grads = tape.backward(loss)
            g = {name: grads.of(leaf) for name, leaf in bind.leaves.items() if model.params[name].trainable}
            lr = cosine_schedule(step + 1, warmup_steps, total_steps, config.lr)
            adamw_step(model.params, g, state, lr, config.weight_decay)
            step += 1
            losses.append(value * len(idx))
            correct += int((logits.value.argmax(-1) == y_tr[idx]).sum())
        record = {"epoch": epoch + 1, "lr": lr, "train_loss": sum(losses) / len(y_tr),
                  "train_acc": correct / len(y_tr), "val_acc": evaluate(model, x_va, y_va)}
        history.append(record)
        if log:
            log(record)

    n_params, n_train = model.param_counts()
    summary = {
        "method": cfg.method,
        "quantize": cfg.quantized,
        "seed": config.seed,
        "epochs": config.total_epochs,
        "final_train_loss": history[-1]["train_loss"],
        "val_acc": history[-1]["val_acc"],
        "test_acc": evaluate(model, x_te, y_te),
        "total_params": n_params,
        "trainable_params": n_train,
        "trainable_fraction": n_train / n_params,
        "measured_activation_bytes": measured,
        "predicted_activation_bytes": predicted,
        "frozen_unchanged": _fingerprint({k: model.params[k].value for k in frozen}) == frozen_before,
        "memory": report.to_dict(layers=False),
    }
    summary["loss_curve_sha256"] = hashlib.sha256(
        json.dumps([h["train_loss"] for h in history]).encode()).hexdigest()
    return FinetuneResult(history, summary, report, model)


def pretrain_backbone(dataset, model_config: ToyViTConfig = None, epochs=5, lr=1e-3, seed=0, batch=32) -> dict:
    """Full fine-tune on a source task and return the backbone weights."""
    model_config = model_config or ToyViTConfig()
    cfg = TrainConfig(method="Full", lr=lr, batch=batch, warmup_epochs=min(1, epochs), total_epochs=epochs,
                      seed=seed, model=model_config)
    result = run_finetune(cfg, dataset)
    params = result.model.params
    return {k: params[k].value.copy() for k in backbone_names(params)}


def write_metrics(result: FinetuneResult, out_dir) -> tuple:
    os.makedirs(out_dir, exist_ok=True)
    metrics = os.path.join(out_dir, "metrics.jsonl")
    summary = os.path.join(out_dir, "summary.json")
    with open(metrics, "w") as fh:
        for rec in result.history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(summary, "w") as fh:
        fh.write(json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
    return metrics, summary


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
