"""Tiny ViT backbone plus the tuning modules that wrap it.

A model owns a flat ``name -> Parameter`` store. Each forward pass binds the
store to a fresh tape, turning every parameter into a leaf whose
``requires_grad`` is its ``trainable`` flag; the op library then decides
what each node keeps. Which parameters train is the whole difference
between the tuning methods (see ``METHODS`` and ``apply_method``).
"""

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .autograd import Tape

METHODS = ("Full", "Linear", "BiasOnly", "LoRA", "Adapter", "VPT", "S2A")
_ALIASES = {m.lower(): m for m in METHODS}
_ALIASES.update({"bias-only": "BiasOnly", "bias_only": "BiasOnly", "bitfit": "BiasOnly"})

# toy "pretrained" weights come from this seed unless the caller overrides it
BACKBONE_SEED = 20240


class ConfigError(ValueError):
    pass


def canonical_method(name: str) -> str:
    try:
        return _ALIASES[str(name).lower()]
    except KeyError:
        raise ConfigError(f"unknown method {name!r}; choose from {', '.join(METHODS)}") from None


@dataclass
class Parameter:
    value: np.ndarray
    trainable: bool = False
    decay: bool = False


@dataclass(frozen=True)
class ToyViTConfig:
    image_size: int = 16
    in_channels: int = 1
    patch: int = 4
    depth: int = 4
    d_model: int = 96
    n_heads: int = 4
    mlp_ratio: int = 4
    n_classes: int = 10
    lsb_factor: int = 8
    lrp_rank: int = 4
    vpt_tokens: int = 8
    bottleneck_factor: int = 8
    method: str = "S2A"
    quantize: bool | None = None  # None: on for S2A, off otherwise
    use_lsb: bool = True
    init_sigma: float = 0.02
    seed: int = BACKBONE_SEED

    def __post_init__(self):
        object.__setattr__(self, "method", canonical_method(self.method))
        if self.image_size % self.patch:
            raise ConfigError(f"image size {self.image_size} is not a multiple of patch {self.patch}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.d_model % self.lsb_factor:
            raise ConfigError(f"d_model {self.d_model} is not divisible by lsb_factor {self.lsb_factor}")
        if self.d_model % self.bottleneck_factor:
            raise ConfigError(f"d_model {self.d_model} is not divisible by bottleneck_factor {self.bottleneck_factor}")
        if not (0 < self.lrp_rank < min(self.n_tokens, self.d_model)):
            raise ConfigError(f"lrp_rank must be in (0, min(N, C)), got {self.lrp_rank}")
        if self.depth < 1 or self.n_classes < 2:
            raise ConfigError("need depth >= 1 and at least 2 classes")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def n_tokens(self) -> int:
        return self.grid ** 2 + 1

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.in_channels

    @property
    def side_width(self) -> int:
        return self.d_model // self.lsb_factor

    @property
    def bottleneck(self) -> int:
        return self.d_model // self.bottleneck_factor

    @property
    def quantized(self) -> bool:
        return self.method == "S2A" if self.quantize is None else bool(self.quantize)

    def with_method(self, method, quantize=None) -> "ToyViTConfig":
        return replace(self, method=method, quantize=quantize)


class Binder:
    """Turns parameters into tape leaves on first use within one forward."""

    def __init__(self, tape, params, train=True):
        self.tape = tape
        self.params = params
        self.train = train
        self.leaves = {}

    def __getitem__(self, name):
        leaf = self.leaves.get(name)
        if leaf is None:
            p = self.params[name]
            leaf = self.tape.leaf(p.value, requires_grad=self.train and p.trainable, tag=name)
            self.leaves[name] = leaf
        return leaf


# --- building blocks -----------------------------------------------------------

class Module:
    def __init__(self, name):
        self.name = name

    def p(self, suffix):
        return f"{self.name}.{suffix}"


class BiasLinear(Module):
    """``y = x W + b``. With ``W`` frozen the tape keeps nothing for it."""

    def __init__(self, name, d_in, d_out, kind="linear"):
        super().__init__(name)
        self.d_in, self.d_out, self.kind = d_in, d_out, kind

    def init(self, params, rng, std=None, zero=False):
        std = (1.0 / np.sqrt(self.d_in)) if std is None else std
        w = np.zeros((self.d_in, self.d_out)) if zero else rng.normal(0.0, std, (self.d_in, self.d_out))
        params[self.p("weight")] = Parameter(w.astype(np.float32))
        params[self.p("bias")] = Parameter(np.zeros(self.d_out, np.float32))

    def __call__(self, bind, x):
        return ops.linear(x, bind[self.p("weight")], bind[self.p("bias")], tag=self.name, kind=self.kind)


class LayerNorm(Module):
    def __init__(self, name, dim):
        super().__init__(name)
        self.dim = dim

    def init(self, params, rng):
        params[self.p("weight")] = Parameter(np.ones(self.dim, np.float32))
        params[self.p("bias")] = Parameter(np.zeros(self.dim, np.float32))

    def __call__(self, bind, x):
        return ops.layernorm(x, bind[self.p("weight")], bind[self.p("bias")], tag=self.name)


class LRPModule(Module):
    """Low-rank prompt ``x + A B``; ``A`` starts at zero, so it starts as the identity."""

    def __init__(self, name, n_tokens, dim, rank, sigma=0.02):
        super().__init__(name)
        if not 0 < rank < min(n_tokens, dim):
            raise ConfigError(f"LRP rank {rank} must be below both N={n_tokens} and C={dim}")
        self.n_tokens, self.dim, self.rank, self.sigma = n_tokens, dim, rank, sigma

    def init(self, params, rng):
        params[self.p("A")] = Parameter(np.zeros((self.n_tokens, self.rank), np.float32))
        params[self.p("B")] = Parameter(rng.normal(0.0, self.sigma, (self.rank, self.dim)).astype(np.float32))

    def __call__(self, bind, x):
        return ops.lrp(x, bind[self.p("A")], bind[self.p("B")], tag=self.name)


class CAPLayer(Module):
    """Parameter-free channel-group average."""

    def __init__(self, name, factor):
        super().__init__(name)
        if factor < 1:
            raise ConfigError(f"CAP factor must be >= 1, got {factor}")
        self.factor = factor

    def init(self, params, rng):
        pass

    def __call__(self, bind, x):
        return ops.cap(x, self.factor, tag=self.name)


class LSBBlock(Module):
    """Pointwise -> depthwise 3x3 -> pointwise, all at width C/r, on the patch grid."""

    def __init__(self, name, width):
        super().__init__(name)
        self.width = width
        self.pw1 = BiasLinear(self.p("pw1"), width, width, kind="pointwise_conv")
        self.pw2 = BiasLinear(self.p("pw2"), width, width, kind="pointwise_conv")

    def init(self, params, rng):
        self.pw1.init(params, rng)
        self.pw2.init(params, rng)
        params[self.p("dw.weight")] = Parameter(rng.normal(0.0, 1.0 / 3.0, (3, 3, self.width)).astype(np.float32))
        params[self.p("dw.bias")] = Parameter(np.zeros(self.width, np.float32))

    def __call__(self, bind, x_grid):
        h = self.pw1(bind, x_grid)
        h = ops.depthwise_conv(h, bind[self.p("dw.weight")], bind[self.p("dw.bias")], tag=self.p("dw"))
        return self.pw2(bind, h)


class Adapter(Module):
    """Bottleneck adapter ``x + up(relu(down(x)))``; ``up`` is zero at init."""

    def __init__(self, name, dim, hidden, quantize=False):
        super().__init__(name)
        self.down = BiasLinear(self.p("down"), dim, hidden)
        self.up = BiasLinear(self.p("up"), hidden, dim)
        self.quantize = quantize

    def init(self, params, rng):
        self.down.init(params, rng, std=0.02)
        self.up.init(params, rng, zero=True)

    def __call__(self, bind, x):
        h = ops.relu(self.down(bind, x), quantize=self.quantize, tag=self.p("relu"))
        return ops.add(x, self.up(bind, h))


class LoRA(Module):
    """Low-rank update ``x A B`` added to a frozen projection; ``A`` starts at zero."""

    def __init__(self, name, d_in, d_out, rank):
        super().__init__(name)
        self.d_in, self.d_out, self.rank = d_in, d_out, rank

    def init(self, params, rng):
        params[self.p("A")] = Parameter(np.zeros((self.d_in, self.rank), np.float32))
        params[self.p("B")] = Parameter(rng.normal(0.0, 0.02, (self.rank, self.d_out)).astype(np.float32))

    def __call__(self, bind, x):
        t = ops.linear(x, bind[self.p("A")], tag=self.p("down"))
        return ops.linear(t, bind[self.p("B")], tag=self.p("up"))


class Block(Module):
    """Pre-norm transformer block with optional LRP, LoRA, adapters and VPT prompts."""

    def __init__(self, name, cfg: ToyViTConfig):
        super().__init__(name)
        c = cfg.d_model
        self.cfg = cfg
        m = cfg.method
        q = cfg.quantized
        self.ln1 = LayerNorm(self.p("ln1"), c)
        self.qkv = BiasLinear(self.p("attn.qkv"), c, 3 * c)
        self.proj = BiasLinear(self.p("attn.proj"), c, c)
        self.ln2 = LayerNorm(self.p("ln2"), c)
        self.fc1 = BiasLinear(self.p("mlp.fc1"), c, cfg.mlp_ratio * c)
        self.fc2 = BiasLinear(self.p("mlp.fc2"), cfg.mlp_ratio * c, c)
        self.lrp = LRPModule(self.p("lrp"), cfg.n_tokens, c, cfg.lrp_rank, cfg.init_sigma) if m == "S2A" else None
        self.lora = LoRA(self.p("lora"), c, c, cfg.bottleneck) if m == "LoRA" else None
        self.adapters = None
        if m == "Adapter":
            self.adapters = (Adapter(self.p("adapter1"), c, cfg.bottleneck, q),
                             Adapter(self.p("adapter2"), c, cfg.bottleneck, q))
        self.prompt_name = self.p("prompt") if m == "VPT" else None
        self.side = None
        if m == "S2A" and cfg.use_lsb:
            self.side = (CAPLayer(self.p("cap"), cfg.lsb_factor), LSBBlock(self.p("lsb"), cfg.side_width))

    def init_backbone(self, params, rng):
        for mod in (self.ln1, self.qkv, self.proj, self.ln2, self.fc1, self.fc2):
            mod.init(params, rng)

    def init_extras(self, params, rng):
        for mod in (self.lrp, self.lora, *(self.adapters or ()), *(self.side or ())):
            if mod is not None:
                mod.init(params, rng)
        if self.prompt_name:
            shape = (1, self.cfg.vpt_tokens, self.cfg.d_model)
            params[self.prompt_name] = Parameter(rng.normal(0.0, self.cfg.init_sigma, shape).astype(np.float32))

    def attention(self, bind, x):
        cfg = self.cfg
        b, n, c = x.shape
        h, d = cfg.n_heads, c // cfg.n_heads
        t = self.ln1(bind, x)
        qkv = self.qkv(bind, t)
        qkv = ops.transpose(ops.reshape(qkv, (b, n, 3, h, d)), (2, 0, 3, 1, 4))

        def part(i):
            return ops.reshape(ops.slice_axis(qkv, 0, i, i + 1), (b, h, n, d))

        q, k, v = part(0), part(1), part(2)
        if self.lora is not None:
            dq = ops.transpose(ops.reshape(self.lora(bind, t), (b, n, h, d)), (0, 2, 1, 3))
            q = ops.add(q, dq)
        s = ops.attention_scores(q, k, 1.0 / np.sqrt(d), tag=self.p("attn.scores"))
        p = ops.softmax(s, quantize=cfg.quantized, tag=self.p("attn.softmax"))
        o = ops.attention_values(p, v, tag=self.p("attn.values"))
        o = ops.reshape(ops.transpose(o, (0, 2, 1, 3)), (b, n, c))
        return self.proj(bind, o)

    def mlp(self, bind, x):
        t = self.ln2(bind, x)
        t = ops.gelu(self.fc1(bind, t), quantize=self.cfg.quantized, tag=self.p("mlp.gelu"))
        return self.fc2(bind, t)

    def __call__(self, bind, x, y_prev=None):
        """Returns ``(x_next, y_next)``; ``y_next`` is None without a side branch."""
        n = x.shape[1]
        if self.lrp is not None:
            x = self.lrp(bind, x)
        if self.prompt_name:
            prompts = ops.broadcast_batch(bind[self.prompt_name], x.shape[0])
            x = ops.concat([x, prompts], axis=1)
        a = self.attention(bind, x)
        if self.adapters:
            a = self.adapters[0](bind, a)
        x = ops.add(x, a)
        if self.prompt_name:
            # prompt outputs are replaced in the next block, so the MLP never needs them
            x = ops.slice_axis(x, 1, 0, n)
        f = self.mlp(bind, x)
        if self.adapters:
            f = self.adapters[1](bind, f)
        x = ops.add(x, f)
        if self.side is None:
            return x, None
        cap, lsb = self.side
        b, g = x.shape[0], self.cfg.grid
        xd = cap(bind, ops.slice_axis(x, 1, 1, n))
        xd = ops.reshape(xd, (b, g, g, self.cfg.side_width))
        if y_prev is not None:
            xd = ops.add(xd, y_prev)
        return x, lsb(bind, xd)


class ToyViT:
    """Patch embedding, ``depth`` blocks, final norm, and a classification head."""

    def __init__(self, cfg: ToyViTConfig, pretrained=None):
        self.cfg = cfg
        c = cfg.d_model
        self.embed = BiasLinear("embed.patch", cfg.patch_dim, c)
        self.blocks = [Block(f"blocks.{i}", cfg) for i in range(cfg.depth)]
        self.norm = LayerNorm("norm", c)
        head_in = c + (cfg.side_width if cfg.method == "S2A" and cfg.use_lsb else 0)
        self.head = BiasLinear("head", head_in, cfg.n_classes)
        self.params: dict[str, Parameter] = {}
        self._init(pretrained)
        apply_method(self.params, cfg.method)

    def _init(self, pretrained):
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)
        self.embed.init(self.params, rng, std=0.5 / np.sqrt(cfg.patch_dim))
        self.params["embed.cls"] = Parameter(rng.normal(0.0, cfg.init_sigma, (1, 1, cfg.d_model)).astype(np.float32))
        self.params["embed.pos"] = Parameter(rng.normal(0.0, cfg.init_sigma, (1, cfg.n_tokens, cfg.d_model)).astype(np.float32))
        for blk in self.blocks:
            blk.init_backbone(self.params, rng)
        self.norm.init(self.params, rng)
        extra = np.random.default_rng([cfg.seed, 1])
        for blk in self.blocks:
            blk.init_extras(self.params, extra)
        self.head.init(self.params, np.random.default_rng([cfg.seed, 2]), std=0.02)
        if pretrained is not None:
            self.load_backbone(pretrained)

    def load_backbone(self, weights):
        """Copy backbone tensors (everything but the head and tuning extras) by name."""
        for name in backbone_names(self.params):
            if name in weights:
                src = np.asarray(weights[name], dtype=np.float32)
                if src.shape != self.params[name].value.shape:
                    raise ConfigError(f"pretrained {name} has shape {src.shape}, model expects {self.params[name].value.shape}")
                self.params[name].value = src.copy()

    def astype(self, dtype):
        for p in self.params.values():
            p.value = p.value.astype(dtype)
        return self

    def trainable(self) -> dict:
        return {k: p for k, p in self.params.items() if p.trainable}

    def param_counts(self):
        total = sum(p.value.size for p in self.params.values())
        return total, sum(p.value.size for p in self.params.values() if p.trainable)

    def patchify(self, images):
        cfg = self.cfg
        x = np.asarray(images)
        if x.ndim == 3:
            x = x[..., None]
        b = x.shape[0]
        if x.shape[1:] != (cfg.image_size, cfg.image_size, cfg.in_channels):
            raise ConfigError(f"images must be [B, {cfg.image_size}, {cfg.image_size}, {cfg.in_channels}], got {x.shape}")
        g, p = cfg.grid, cfg.patch
        x = x.reshape(b, g, p, g, p, cfg.in_channels).transpose(0, 1, 3, 2, 4, 5)
        dtype = self.params["embed.patch.weight"].value.dtype
        return np.ascontiguousarray(x.reshape(b, g * g, cfg.patch_dim), dtype=dtype)

    def forward(self, tape, images, labels=None, train=True, bind=None):
        """Build the graph on ``tape``; returns ``(logits, loss)`` (loss None without labels).

        Pass a ``Binder`` to get at the parameter leaves (and so their gradients).
        """
        bind = bind or Binder(tape, self.params, train=train)
        patches = tape.leaf(self.patchify(images), tag="input")
        b = patches.shape[0]
        x = self.embed(bind, patches)
        cls = ops.broadcast_batch(bind["embed.cls"], b)
        x = ops.add(ops.concat([cls, x], axis=1), bind["embed.pos"])
        y = None
        for blk in self.blocks:
            x, y = blk(bind, x, y)
        x = self.norm(bind, x)
        feats = ops.reshape(ops.slice_axis(x, 1, 0, 1), (b, self.cfg.d_model))
        if y is not None:
            side = ops.mean(ops.reshape(y, (b, self.cfg.grid ** 2, self.cfg.side_width)), axis=1)
            feats = ops.concat([feats, side], axis=-1)
        logits = self.head(bind, feats)
        loss = ops.cross_entropy(logits, labels, tag="loss") if labels is not None else None
        return logits, loss

    def backbone_features(self, images):
        """Final class-token features, evaluated without recording any saves."""
        tape = Tape()
        bind = Binder(tape, self.params, train=False)
        x = self.embed(bind, tape.leaf(self.patchify(images)))
        b = x.shape[0]
        x = ops.add(ops.concat([ops.broadcast_batch(bind["embed.cls"], b), x], axis=1), bind["embed.pos"])
        y = None
        for blk in self.blocks:
            x, y = blk(bind, x, y)
        return self.norm(bind, x).value[:, 0, :]

    def predict(self, images, batch=256):
        out = []
        for i in range(0, len(images), batch):
            logits, _ = self.forward(Tape(), images[i:i + batch], train=False)
            out.append(logits.value)
        return np.concatenate(out, axis=0)


_EXTRA_MARKERS = (".lrp.", ".lsb.", ".lora.", ".adapter1.", ".adapter2.", ".prompt")


def backbone_names(params) -> list:
    return [k for k in params if not k.startswith("head.") and not any(m in k for m in _EXTRA_MARKERS)]


def is_trainable(name: str, method: str) -> bool:
    method = canonical_method(method)
    if name.startswith("head."):
        return True
    if method == "Full":
        return True
    if method == "BiasOnly":
        return name.endswith(".bias") and not any(m in name for m in _EXTRA_MARKERS)
    if method == "S2A":
        return name.endswith(".bias") or ".lrp." in name or ".lsb." in name
    if method == "LoRA":
        return ".lora." in name
    if method == "Adapter":
        return ".adapter1." in name or ".adapter2." in name
    if method == "VPT":
        return name.endswith(".prompt")
    return False


def wants_decay(name: str, value) -> bool:
    if np.ndim(value) < 2:
        return False
    return not (".lrp." in name or name.endswith(".prompt") or name.startswith("embed.cls") or name.startswith("embed.pos"))


def apply_method(params, method):
    for name, p in params.items():
        p.trainable = is_trainable(name, method)
        p.decay = p.trainable and wants_decay(name, p.value)


def baseline_adapters(method, config: ToyViTConfig, pretrained=None) -> ToyViT:
    """Build one of the comparison baselines (LoRA, Adapter or VPT)."""
    method = canonical_method(method)
    if method not in ("LoRA", "Adapter", "VPT"):
        raise ConfigError(f"baseline_adapters builds LoRA, Adapter or VPT, not {method}")
    return ToyViT(config.with_method(method, config.quantize), pretrained)


# --- checkpoints ------------------------------------------------------------------
#
# magic "MTCK" | u32 count | count x (u16 key length | utf-8 key | tensor)
# tensor: bits u8 (=32) | rank u8 | dims u32 * rank | float32 data, all little endian

MAGIC = b"MTCK"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict):
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(tensors)))
        for key in sorted(tensors):
            arr = np.ascontiguousarray(tensors[key], dtype="<f4")
            raw = key.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<BB", 32, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    data = open(path, "rb").read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r} at byte 0")
    off = 4

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(data):
            raise CheckpointError(f"{path}: truncated at byte {off}")
        vals = struct.unpack_from(fmt, data, off)
        off += size
        return vals

    (count,) = take("<I")
    out = {}
    for _ in range(count):
        (klen,) = take("<H")
        key = bytes(take(f"<{klen}s")[0]).decode("utf-8")
        bits, rank = take("<BB")
        if bits != 32:
            raise CheckpointError(f"{path}: tensor {key!r} has {bits}-bit storage at byte {off - 2}")
        shape = take(f"<{rank}I")
        n = int(np.prod(shape, dtype=np.int64))
        if off + 4 * n > len(data):
            raise CheckpointError(f"{path}: tensor {key!r} truncated at byte {off}")
        out[key] = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
    return out


def model_state(model: ToyViT) -> dict:
    return {k: p.value for k, p in model.params.items()}
