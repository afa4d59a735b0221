"""Theoretical training-memory accountant.

Walks a model description layer by layer, tracking which tensors need a
gradient under a tuning method, and charges each layer for what its
backward must keep. The walk mirrors the op library's save rules but never
touches a tensor, so it scales to ViT-B/16.

Two scopes are reported. ``core`` is what the method comparison is about:
inputs of linears with trainable weights, softmax outputs, GELU/ReLU state,
the side branch, LoRA/adapter inputs and the head input. ``aux`` holds the
remaining bookkeeping a complete tape also keeps (attention matmul operands,
LayerNorm statistics, loss probabilities). ``total_bytes`` covers weights,
gradients, optimizer moments and core activations; ``total_with_aux_bytes``
adds the rest.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import StoragePolicy, Tape, payload_nbytes
from .model import METHODS, ConfigError, ToyViT, ToyViTConfig, canonical_method, is_trainable

MB = 1 << 20

KINDS = ("linear", "attention-softmax", "attention-matmul", "gelu", "relu", "layernorm", "lrp", "cap",
         "lsb", "adapter", "lora", "vpt-prompt", "head", "embedding", "loss")
AUX_KINDS = frozenset({"attention-matmul", "layernorm", "loss"})


@dataclass
class LayerSpec:
    name: str
    kind: str
    elements: int  # per sample; saved count when policy saves, nominal size otherwise
    param_count: int
    trainable_params: int
    save_policy: StoragePolicy

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"layer {self.name}: unknown kind {self.kind!r}")
        if isinstance(self.save_policy, str):
            self.save_policy = StoragePolicy(self.save_policy)
        if self.elements <= 0:
            raise ConfigError(f"layer {self.name}: activation elements must be positive")

    @property
    def trainable(self) -> bool:
        return self.trainable_params > 0

    @property
    def scope(self) -> str:
        return "aux" if self.kind in AUX_KINDS else "core"

    def activation_elements(self, batch: int) -> int:
        return batch * self.elements

    def saved_bytes(self, batch: int) -> int:
        return payload_nbytes(self.save_policy, self.activation_elements(batch))

    def to_dict(self):
        d = asdict(self)
        d["save_policy"] = self.save_policy.value
        return d


@dataclass(frozen=True)
class MethodProfile:
    method: str
    quantize: bool
    lrp_rank: int = 30
    lsb_factor: int = 8
    vpt_tokens: int = 50
    bottleneck_factor: int = 8

    def policy_table(self) -> dict:
        """Kind -> policy a layer of that kind gets when its backward needs state."""
        q = self.quantize
        return {
            "linear": "Full32 if W trains, else NoSave",
            "attention-softmax": "Quant4" if q else "Full32",
            "gelu": "Quant4" if q else "Full32",
            "relu": "Mask1" if q else "Full32",
            "lrp": "NoSave",
            "cap": "NoSave",
            "lsb": "Full32",
            "lora": "Full32",
            "adapter": "Full32",
            "head": "Full32",
        }


PROFILES = {m: MethodProfile(m, quantize=(m == "S2A")) for m in METHODS}


@dataclass(frozen=True)
class Geometry:
    name: str
    depth: int
    d_model: int
    n_tokens: int  # including the class token
    n_heads: int
    mlp_hidden: int
    n_classes: int
    patch_dim: int

    @property
    def grid_tokens(self) -> int:
        return self.n_tokens - 1


VIT_B_16 = Geometry("vit_b_16", depth=12, d_model=768, n_tokens=197, n_heads=12,
                    mlp_hidden=3072, n_classes=100, patch_dim=16 * 16 * 3)


@dataclass
class ModelSpec:
    arch: str
    batch: int
    profile: MethodProfile
    layers: list

    def to_dict(self):
        return {"arch": self.arch, "batch": self.batch, "method": self.profile.method,
                "quantize": self.profile.quantize, "layers": [l.to_dict() for l in self.layers]}


def _toy_geometry(cfg: ToyViTConfig) -> Geometry:
    return Geometry("toy_vit", cfg.depth, cfg.d_model, cfg.n_tokens, cfg.n_heads,
                    cfg.mlp_ratio * cfg.d_model, cfg.n_classes, cfg.patch_dim)


def _toy_profile(cfg: ToyViTConfig) -> MethodProfile:
    return MethodProfile(cfg.method, cfg.quantized, cfg.lrp_rank, cfg.lsb_factor,
                         cfg.vpt_tokens, cfg.bottleneck_factor)


class _Walker:
    def __init__(self, geo: Geometry, prof: MethodProfile, use_lsb=True):
        self.geo, self.prof, self.use_lsb = geo, prof, use_lsb
        self.layers = []

    def t(self, name):
        return is_trainable(name, self.prof.method)

    def add(self, name, kind, elements, saves, policy=StoragePolicy.FULL32, params=None):
        params = params or {}
        trainable = sum(n for p, n in params.items() if self.t(p))
        self.layers.append(LayerSpec(name, kind, int(elements), int(sum(params.values())), int(trainable),
                                     policy if saves else StoragePolicy.NOSAVE))

    def linear(self, name, kind, tokens, d_in, d_out, rg_in, bias=True):
        w, b = f"{name}.weight", f"{name}.bias"
        params = {w: d_in * d_out}
        if bias:
            params[b] = d_out
        self.add(name, kind, tokens * d_in, self.t(w), params=params)
        return rg_in or self.t(w) or (bias and self.t(b))

    def layernorm(self, name, tokens, rg_in):
        c = self.geo.d_model
        w, b = f"{name}.weight", f"{name}.bias"
        self.add(name, "layernorm", tokens * c + tokens, rg_in or self.t(w), params={w: c, b: c})
        return rg_in or self.t(w) or self.t(b)

    def quantizable(self, name, kind, elements, rg_in):
        q = self.prof.quantize
        policy = {"attention-softmax": StoragePolicy.QUANT4, "gelu": StoragePolicy.QUANT4,
                  "relu": StoragePolicy.MASK1}[kind] if q else StoragePolicy.FULL32
        self.add(name, kind, elements, rg_in, policy)
        return rg_in

    def adapter(self, name, tokens, rg_in):
        c, hid = self.geo.d_model, self.geo.d_model // self.prof.bottleneck_factor
        rg = self.linear(f"{name}.down", "adapter", tokens, c, hid, rg_in)
        rg = self.quantizable(f"{name}.relu", "relu", tokens * hid, rg)
        rg = self.linear(f"{name}.up", "adapter", tokens, hid, c, rg)
        return rg_in or rg

    def block(self, i, rg, rg_side):
        g, m = self.geo, self.prof.method
        c, h, n = g.d_model, g.n_heads, g.n_tokens
        p = f"blocks.{i}"
        if m == "S2A":
            r = self.prof.lrp_rank
            self.add(f"{p}.lrp", "lrp", n * c, False, params={f"{p}.lrp.A": n * r, f"{p}.lrp.B": r * c})
            rg = rg or self.t(f"{p}.lrp.A") or self.t(f"{p}.lrp.B")
        na = n
        if m == "VPT":
            na = n + self.prof.vpt_tokens
            self.add(f"{p}.prompt", "vpt-prompt", self.prof.vpt_tokens * c, False,
                     params={f"{p}.prompt": self.prof.vpt_tokens * c})
            rg = rg or self.t(f"{p}.prompt")
        # attention
        rg_t = self.layernorm(f"{p}.ln1", na, rg)
        rg_qkv = self.linear(f"{p}.attn.qkv", "linear", na, c, 3 * c, rg_t)
        rg_q = rg_k = rg_v = rg_qkv
        if m == "LoRA":
            rank = c // self.prof.bottleneck_factor
            a, b = f"{p}.lora.A", f"{p}.lora.B"
            self.add(f"{p}.lora.down", "lora", na * c, self.t(a), params={a: c * rank})
            self.add(f"{p}.lora.up", "lora", na * rank, self.t(b), params={b: rank * c})
            rg_q = rg_qkv or rg_t or self.t(a) or self.t(b)
        # scores keep k for dq and q for dk
        self.add(f"{p}.attn.scores", "attention-matmul", na * c * (int(rg_q) + int(rg_k)) or na * c, rg_q or rg_k)
        rg_s = rg_q or rg_k
        self.quantizable(f"{p}.attn.softmax", "attention-softmax", h * na * na, rg_s)
        keep = (na * c if rg_s else 0) + (h * na * na if rg_v and not rg_s else 0)
        self.add(f"{p}.attn.values", "attention-matmul", keep or na * c, keep > 0)
        rg_o = rg_s or rg_v
        rg_a = self.linear(f"{p}.attn.proj", "linear", na, c, c, rg_o)
        if m == "Adapter":
            rg_a = self.adapter(f"{p}.adapter1", na, rg_a)
        rg = rg or rg_a
        # MLP (prompt positions were dropped)
        rg_t = self.layernorm(f"{p}.ln2", n, rg)
        rg_f = self.linear(f"{p}.mlp.fc1", "linear", n, c, g.mlp_hidden, rg_t)
        rg_f = self.quantizable(f"{p}.mlp.gelu", "gelu", n * g.mlp_hidden, rg_f)
        rg_f = self.linear(f"{p}.mlp.fc2", "linear", n, g.mlp_hidden, c, rg_f)
        if m == "Adapter":
            rg_f = self.adapter(f"{p}.adapter2", n, rg_f)
        rg = rg or rg_f
        if m == "S2A" and self.use_lsb:
            cs, gt = c // self.prof.lsb_factor, g.grid_tokens
            self.add(f"{p}.cap", "cap", gt * c, False)
            rg_x = rg if rg_side is None else (rg or rg_side)
            rg_y = self.linear(f"{p}.lsb.pw1", "lsb", gt, cs, cs, rg_x)
            k, kb = f"{p}.lsb.dw.weight", f"{p}.lsb.dw.bias"
            self.add(f"{p}.lsb.dw", "lsb", gt * cs, self.t(k), params={k: 9 * cs, kb: cs})
            rg_y = rg_y or self.t(k) or self.t(kb)
            rg_side = self.linear(f"{p}.lsb.pw2", "lsb", gt, cs, cs, rg_y)
        return rg, rg_side

    def run(self):
        g = self.geo
        c, n = g.d_model, g.n_tokens
        rg = self.linear("embed.patch", "embedding", g.grid_tokens, g.patch_dim, c, False)
        self.add("embed.tokens", "embedding", n * c, False, params={"embed.cls": c, "embed.pos": n * c})
        rg = rg or self.t("embed.cls") or self.t("embed.pos")
        rg_side = None
        for i in range(g.depth):
            rg, rg_side = self.block(i, rg, rg_side)
        rg = self.layernorm("norm", n, rg)
        head_in = c + (c // self.prof.lsb_factor if self.prof.method == "S2A" and self.use_lsb else 0)
        rg = self.linear("head", "head", 1, head_in, g.n_classes, rg)
        self.add("loss", "loss", g.n_classes, rg)
        return self.layers


def build_model_spec(arch, batch: int, profile=None) -> ModelSpec:
    """Layer list for ``arch`` ("vit_b_16" or a ToyViTConfig) under a method profile.

    For the toy model the profile defaults to the config's own method and
    quantization setting; for ViT-B/16 it defaults to S2A.
    """
    if not isinstance(batch, (int, np.integer)) or batch < 1:
        raise ConfigError(f"batch must be a positive integer, got {batch!r}")
    if isinstance(profile, str):
        profile = PROFILES[canonical_method(profile)]
    use_lsb = True
    if isinstance(arch, ToyViTConfig):
        geo = _toy_geometry(arch)
        use_lsb = arch.use_lsb
        if profile is None:
            profile = _toy_profile(arch)
    elif arch == "vit_b_16":
        geo = VIT_B_16
        profile = profile or PROFILES["S2A"]
    else:
        raise ConfigError(f"unknown arch {arch!r}; expected 'vit_b_16' or a toy config")
    return ModelSpec(geo.name, int(batch), profile, _Walker(geo, profile, use_lsb).run())


@dataclass
class MemoryRow:
    name: str
    kind: str
    scope: str
    policy: str
    elements: int
    activation_bytes: int
    quant_overhead_bytes: int
    param_count: int
    trainable_params: int


@dataclass
class MemoryReport:
    arch: str
    method: str
    quantize: bool
    batch: int
    rows: list
    total_params: int
    trainable_params: int
    weight_bytes: int
    gradient_bytes: int
    optimizer_bytes: int
    activation_bytes: int
    quant_overhead_bytes: int
    aux_activation_bytes: int
    total_bytes: int = field(init=False)
    total_with_aux_bytes: int = field(init=False)

    def __post_init__(self):
        self.total_bytes = (self.weight_bytes + self.gradient_bytes + self.optimizer_bytes
                            + self.activation_bytes + self.quant_overhead_bytes)
        self.total_with_aux_bytes = self.total_bytes + self.aux_activation_bytes

    @property
    def total_mb(self) -> float:
        return self.total_bytes / MB

    @property
    def trainable_percent(self) -> float:
        return 100.0 * self.trainable_params / self.total_params

    def predicted_tape_bytes(self) -> dict:
        """Name -> bytes the tape should hold for that layer (all scopes, overhead included)."""
        return {r.name: r.activation_bytes + r.quant_overhead_bytes
                for r in self.rows if r.activation_bytes + r.quant_overhead_bytes}

    def to_dict(self, layers=True):
        d = {k: v for k, v in asdict(self).items() if k != "rows"}
        d["total_mb"] = round(self.total_mb, 3)
        d["total_with_aux_mb"] = round(self.total_with_aux_bytes / MB, 3)
        d["trainable_percent"] = round(self.trainable_percent, 4)
        if layers:
            d["layers"] = [asdict(r) for r in self.rows]
        return d

    def to_json(self, layers=True) -> str:
        return json.dumps(self.to_dict(layers), indent=2, sort_keys=True)

    def to_table(self, layers=False) -> str:
        lines = [format_summary_table([self])]
        lines.append("")
        for label, value in (("weights", self.weight_bytes), ("gradients", self.gradient_bytes),
                             ("optimizer", self.optimizer_bytes), ("activations", self.activation_bytes),
                             ("quant overhead", self.quant_overhead_bytes), ("total", self.total_bytes),
                             ("aux activations", self.aux_activation_bytes),
                             ("total with aux", self.total_with_aux_bytes)):
            lines.append(f"{label:<16} {value / MB:>12.2f} MB")
        if layers:
            lines.append("")
            lines.append(f"{'layer':<28} {'kind':<18} {'scope':<5} {'policy':<7} {'bytes':>12}")
            for r in self.rows:
                lines.append(f"{r.name:<28} {r.kind:<18} {r.scope:<5} {r.policy:<7} "
                             f"{r.activation_bytes + r.quant_overhead_bytes:>12d}")
        return "\n".join(lines)


def format_summary_table(reports) -> str:
    lines = [f"{'Method':<10} {'Params %':>9} {'Memory MB':>10}"]
    for r in reports:
        lines.append(f"{r.method:<10} {r.trainable_percent:>9.2f} {r.total_mb:>10.1f}")
    return "\n".join(lines)


def estimate(spec: ModelSpec, profile=None) -> MemoryReport:
    if profile is not None:
        name = profile.method if isinstance(profile, MethodProfile) else canonical_method(profile)
        if name != spec.profile.method:
            raise ConfigError(f"spec was built for {spec.profile.method}, not {name}")
    rows = []
    for layer in spec.layers:
        total = layer.saved_bytes(spec.batch)
        overhead = 8 if layer.save_policy is StoragePolicy.QUANT4 else 0
        rows.append(MemoryRow(layer.name, layer.kind, layer.scope, layer.save_policy.value,
                              layer.activation_elements(spec.batch), total - overhead, overhead,
                              layer.param_count, layer.trainable_params))
    n_params = sum(r.param_count for r in rows)
    n_train = sum(r.trainable_params for r in rows)
    core = [r for r in rows if r.scope == "core"]
    return MemoryReport(
        arch=spec.arch, method=spec.profile.method, quantize=spec.profile.quantize, batch=spec.batch,
        rows=rows, total_params=n_params, trainable_params=n_train,
        weight_bytes=4 * n_params, gradient_bytes=4 * n_train, optimizer_bytes=8 * n_train,
        activation_bytes=sum(r.activation_bytes for r in core),
        quant_overhead_bytes=sum(r.quant_overhead_bytes for r in rows),
        aux_activation_bytes=sum(r.activation_bytes for r in rows if r.scope == "aux"),
    )


def estimate_method(arch, method, batch, quantize=None) -> MemoryReport:
    method = canonical_method(method)
    if isinstance(arch, ToyViTConfig):
        arch = arch.with_method(method, quantize)
        return estimate(build_model_spec(arch, batch))
    prof = PROFILES[method]
    if quantize is not None and quantize != prof.quantize:
        prof = MethodProfile(**{**asdict(prof), "quantize": bool(quantize)})
    return estimate(build_model_spec(arch, batch, prof))


# --- JSON model descriptions ---------------------------------------------------------

def spec_from_json(text: str) -> ModelSpec:
    """Read a ModelSpec from JSON: ``{"arch", "batch", "method", "quantize", "layers": [...]}``.

    Each layer carries the LayerSpec fields (``name``, ``kind``, ``elements``,
    ``param_count``, ``trainable_params``, ``save_policy``).
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"model description is not valid JSON (line {exc.lineno}): {exc.msg}") from None
    try:
        method = canonical_method(doc.get("method", "S2A"))
        prof = MethodProfile(method, bool(doc.get("quantize", method == "S2A")))
        layers = [LayerSpec(**layer) for layer in doc["layers"]]
        return ModelSpec(str(doc.get("arch", "custom")), int(doc["batch"]), prof, layers)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad model description: {exc}") from None


# --- dual-path check ---------------------------------------------------------------------

@dataclass
class Discrepancy:
    name: str
    predicted: int
    measured: int


@dataclass
class DiscrepancyReport:
    method: str
    batch: int
    predicted_total: int
    measured_total: int
    mismatches: list

    @property
    def ok(self) -> bool:
        return not self.mismatches and self.predicted_total == self.measured_total


def verify_against_tape(model: ToyViT, profile=None, batch: int = 4, seed: int = 0, spec=None) -> DiscrepancyReport:
    """Compare predicted per-layer saved bytes with one recorded forward pass."""
    cfg = model.cfg
    if spec is None:
        spec = build_model_spec(cfg, batch)
    report = estimate(spec, profile)
    rng = np.random.default_rng(seed)
    images = rng.random((spec.batch, cfg.image_size, cfg.image_size, cfg.in_channels), dtype=np.float32)
    labels = rng.integers(0, cfg.n_classes, spec.batch)
    tape = Tape()
    model.forward(tape, images, labels)
    measured = tape.bytes_by_tag()
    predicted = report.predicted_tape_bytes()
    mismatches = [Discrepancy(name, predicted.get(name, 0), measured.get(name, 0))
                  for name in sorted(set(measured) | set(predicted))
                  if predicted.get(name, 0) != measured.get(name, 0)]
    return DiscrepancyReport(cfg.method, spec.batch, sum(predicted.values()), tape.live_activation_bytes(), mismatches)
