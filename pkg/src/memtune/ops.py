"""Differentiable ops. Each forward decides its node's saved state.

The rule everywhere: keep only what the backward will read, and only for
parents that actually want a gradient. Parameters referenced by a backward
(a frozen ``W`` for ``dx = g W^T``, LRP's ``A`` and ``B``) live in the
node's ``ctx``; they are weights, not activations, and cost nothing here.
"""

import numpy as np

from . import quant
from .autograd import NOSAVE, SavedActivation, StoragePolicy, register_op
from .tensor import (
    DimensionError,
    depthwise_conv as _dw_conv,
    depthwise_conv_input_grad,
    depthwise_conv_kernel_grad,
    matmul,
    pointwise_conv as _pw_conv,
)

FULL = StoragePolicy.FULL32
Q4 = StoragePolicy.QUANT4
M1 = StoragePolicy.MASK1
NONE = StoragePolicy.NOSAVE


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _shape(tape, pid):
    return tape.nodes[pid].output_shape


# --- structural ops (never save anything) ----------------------------------

def add(a, b, tag=None):
    return a.tape.apply("add", [a, b], a.value + b.value, tag=tag)


def _add_backward(node, g, needs, tape):
    return [_unbroadcast(g, _shape(tape, p)) if n else None for p, n in zip(node.parent_ids, needs)]


register_op("add", [NONE], _add_backward)


def scale(x, c, tag=None):
    return x.tape.apply("scale", [x], x.value * x.value.dtype.type(c), tag=tag, c=c)


register_op("scale", [NONE], lambda node, g, needs, tape: [g * g.dtype.type(node.ctx["c"])])


def mul_const(x, c, tag=None):
    c = np.asarray(c, dtype=x.value.dtype)
    return x.tape.apply("mul_const", [x], x.value * c, tag=tag, c=c)


register_op("mul_const", [NONE], lambda node, g, needs, tape: [_unbroadcast(g * node.ctx["c"], _shape(tape, node.parent_ids[0]))])


def mul(a, b, tag=None):
    """Elementwise product of two tape values (each saves the other)."""
    keep = {}
    if a.requires_grad:
        keep["b"] = b.value
    if b.requires_grad:
        keep["a"] = a.value
    saved = SavedActivation.full(**keep) if keep else NOSAVE
    return a.tape.apply("mul", [a, b], a.value * b.value, saved, tag=tag)


def _mul_backward(node, g, needs, tape):
    sa, sb = (_shape(tape, p) for p in node.parent_ids)
    return [_unbroadcast(g * node.get("b"), sa) if needs[0] else None,
            _unbroadcast(g * node.get("a"), sb) if needs[1] else None]


register_op("mul", [FULL, NONE], _mul_backward)


def sum_all(x, tag=None):
    return x.tape.apply("sum", [x], np.asarray(x.value.sum(), dtype=x.value.dtype), tag=tag)


register_op("sum", [NONE], lambda node, g, needs, tape: [np.broadcast_to(g, _shape(tape, node.parent_ids[0])).copy()])


def mean(x, axis, tag=None):
    return x.tape.apply("mean", [x], x.value.mean(axis=axis), tag=tag, axis=axis)


def _mean_backward(node, g, needs, tape):
    shape = _shape(tape, node.parent_ids[0])
    axis = node.ctx["axis"]
    n = shape[axis]
    return [np.broadcast_to(np.expand_dims(g, axis) / g.dtype.type(n), shape).copy()]


register_op("mean", [NONE], _mean_backward)


def reshape(x, shape, tag=None):
    return x.tape.apply("reshape", [x], x.value.reshape(shape), tag=tag)


register_op("reshape", [NONE], lambda node, g, needs, tape: [g.reshape(_shape(tape, node.parent_ids[0]))])


def transpose(x, axes, tag=None):
    return x.tape.apply("transpose", [x], np.ascontiguousarray(x.value.transpose(axes)), tag=tag, axes=tuple(axes))


register_op("transpose", [NONE], lambda node, g, needs, tape: [np.ascontiguousarray(g.transpose(np.argsort(node.ctx["axes"])))])


def slice_axis(x, axis, start, stop, tag=None):
    index = [slice(None)] * x.value.ndim
    index[axis] = slice(start, stop)
    out = np.ascontiguousarray(x.value[tuple(index)])
    return x.tape.apply("slice", [x], out, tag=tag, axis=axis, start=start, stop=stop)


def _slice_backward(node, g, needs, tape):
    shape = _shape(tape, node.parent_ids[0])
    out = np.zeros(shape, dtype=g.dtype)
    index = [slice(None)] * len(shape)
    index[node.ctx["axis"]] = slice(node.ctx["start"], node.ctx["stop"])
    out[tuple(index)] = g
    return [out]


register_op("slice", [NONE], _slice_backward)


def concat(parts, axis=-1, tag=None):
    out = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    return parts[0].tape.apply("concat", parts, out, tag=tag, axis=axis, sizes=sizes)


def _concat_backward(node, g, needs, tape):
    cuts = np.cumsum(node.ctx["sizes"])[:-1]
    pieces = np.split(g, cuts, axis=node.ctx["axis"])
    return [np.ascontiguousarray(p) if n else None for p, n in zip(pieces, needs)]


register_op("concat", [NONE], _concat_backward)


def broadcast_batch(x, batch, tag=None):
    """Repeat a ``[1, ...]`` tensor ``batch`` times along axis 0."""
    if x.value.shape[0] != 1:
        raise DimensionError(f"broadcast_batch expects a leading axis of 1, got {x.value.shape}")
    out = np.repeat(x.value, batch, axis=0)
    return x.tape.apply("broadcast_batch", [x], out, tag=tag)


register_op("broadcast_batch", [NONE], lambda node, g, needs, tape: [g.sum(axis=0, keepdims=True)])


# --- parametric ops ---------------------------------------------------------

def linear(x, w, b=None, tag=None, kind="linear"):
    """``y = x W + b`` over the last axis.

    The input is kept (Full32) only when ``W`` is being trained; with ``W``
    frozen the backward needs ``g``, ``W`` and nothing else.
    """
    if x.value.shape[-1] != w.value.shape[0]:
        raise DimensionError(f"linear input {x.value.shape} does not match weight {w.value.shape}")
    lead = x.value.shape[:-1]
    if kind == "pointwise_conv":
        bias = b.value if b is not None else np.zeros(w.value.shape[1], dtype=w.value.dtype)
        y = _pw_conv(x.value, w.value, bias)
    else:
        y = matmul(x.value.reshape(-1, x.value.shape[-1]), w.value).reshape(*lead, w.value.shape[1])
        if b is not None:
            y = y + b.value
    saved = SavedActivation.full(x=x.value) if w.requires_grad else NOSAVE
    parents = [x, w] + ([b] if b is not None else [])
    return x.tape.apply(kind, parents, y, saved, tag=tag, w=w.value)


def pointwise_conv(x, w, b, tag=None):
    return linear(x, w, b, tag=tag, kind="pointwise_conv")


def _linear_backward(node, g, needs, tape):
    w = node.ctx["w"]
    g2 = g.reshape(-1, g.shape[-1])
    out = [None] * len(needs)
    if needs[0]:
        out[0] = matmul(g2, np.ascontiguousarray(w.T)).reshape(_shape(tape, node.parent_ids[0]))
    if needs[1]:
        x = node.get("x")
        out[1] = matmul(np.ascontiguousarray(x.reshape(-1, x.shape[-1]).T), g2)
    if len(needs) > 2 and needs[2]:
        out[2] = g2.sum(axis=0)
    return out


register_op("linear", [FULL, NONE], _linear_backward)
register_op("pointwise_conv", [FULL, NONE], _linear_backward)


def depthwise_conv(x, kernel, b, tag=None):
    y = _dw_conv(x.value, kernel.value, b.value)
    saved = SavedActivation.full(x=x.value) if kernel.requires_grad else NOSAVE
    return x.tape.apply("depthwise_conv", [x, kernel, b], y, saved, tag=tag, kernel=kernel.value)


def _dw_backward(node, g, needs, tape):
    out = [None, None, None]
    if needs[0]:
        out[0] = depthwise_conv_input_grad(g, node.ctx["kernel"])
    if needs[1]:
        out[1] = depthwise_conv_kernel_grad(node.get("x"), g)
    if needs[2]:
        out[2] = g.reshape(-1, g.shape[-1]).sum(axis=0)
    return out


register_op("depthwise_conv", [FULL, NONE], _dw_backward)


def layernorm(x, gamma, beta, eps=1e-6, tag=None):
    """LayerNorm over the last axis.

    ``dx`` and ``dgamma`` both need the normalized input, so it is kept
    (with the per-row inverse std) whenever either is wanted, even when
    only the bias trains.
    """
    v = x.value
    mu = v.mean(axis=-1, keepdims=True)
    var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
    rstd = (1.0 / np.sqrt(var + eps)).astype(v.dtype)
    xhat = (v - mu) * rstd
    y = xhat * gamma.value + beta.value
    saved = NOSAVE
    if x.requires_grad or gamma.requires_grad:
        saved = SavedActivation.full(xhat=xhat, rstd=rstd)
    return x.tape.apply("layernorm", [x, gamma, beta], y, saved, tag=tag, gamma=gamma.value)


def _layernorm_backward(node, g, needs, tape):
    out = [None, None, None]
    c = g.shape[-1]
    if needs[2]:
        out[2] = g.reshape(-1, c).sum(axis=0)
    if needs[0] or needs[1]:
        xhat = node.get("xhat")
        if needs[1]:
            out[1] = (g * xhat).reshape(-1, c).sum(axis=0)
        if needs[0]:
            rstd = node.get("rstd")
            gx = g * node.ctx["gamma"]
            out[0] = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                             - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
    return out


register_op("layernorm", [FULL, NONE], _layernorm_backward)


def lrp(x, a, b, tag=None):
    """Low-rank prompt: ``y = x + A B`` with ``A: [N, r]``, ``B: [r, C]``."""
    delta = matmul(a.value, b.value)
    if x.value.shape[-2:] != delta.shape:
        raise DimensionError(f"LRP prompt {delta.shape} does not match tokens {x.value.shape}")
    return x.tape.apply("lrp", [x, a, b], x.value + delta, NOSAVE, tag=tag, a=a.value, b=b.value)


def _lrp_backward(node, g, needs, tape):
    g2 = g.reshape(-1, *g.shape[-2:]).sum(axis=0) if g.ndim > 2 else g
    a, b = node.ctx["a"], node.ctx["b"]
    return [
        g if needs[0] else None,
        matmul(g2, np.ascontiguousarray(b.T)) if needs[1] else None,
        matmul(np.ascontiguousarray(a.T), g2) if needs[2] else None,
    ]


register_op("lrp", [NONE], _lrp_backward)


def cap(x, r, tag=None):
    """Channel average pooling: mean over consecutive groups of ``r`` channels."""
    c = x.value.shape[-1]
    if r < 1 or c % r:
        raise ValueError(f"CAP needs channels ({c}) divisible by the compression factor ({r})")
    y = x.value.reshape(*x.value.shape[:-1], c // r, r).mean(axis=-1)
    return x.tape.apply("cap", [x], y, NOSAVE, tag=tag, r=r)


def _cap_backward(node, g, needs, tape):
    r = node.ctx["r"]
    return [np.repeat(g / g.dtype.type(r), r, axis=-1)]


register_op("cap", [NONE], _cap_backward)


# --- non-parametric layers with policy-dependent saves ------------------------

def softmax(x, quantize=False, tag=None):
    y = quant.softmax(x.value)
    saved = NOSAVE
    if x.requires_grad:
        saved = SavedActivation.blob("y", quant.quantize(y, 4)) if quantize else SavedActivation.full(y=y)
    return x.tape.apply("softmax", [x], y, saved, tag=tag)


register_op("softmax", [FULL, Q4], lambda node, g, needs, tape: [quant.softmax_backward(node.get("y"), g)])


def gelu(x, quantize=False, tag=None):
    v = x.value
    y = quant.gelu(v).astype(v.dtype, copy=False)
    saved = NOSAVE
    if x.requires_grad:
        if quantize:
            saved = SavedActivation.blob("x", quant.quantize(np.clip(v, -quant.GELU_CLIP, quant.GELU_CLIP), 4))
        else:
            saved = SavedActivation.full(x=v)
    return x.tape.apply("gelu", [x], y, saved, tag=tag)


register_op("gelu", [FULL, Q4], lambda node, g, needs, tape: [quant.gelu_backward(node.get("x"), g)])


def relu(x, quantize=False, tag=None):
    v = x.value
    y = np.maximum(v, 0).astype(v.dtype, copy=False)
    saved = NOSAVE
    if x.requires_grad:
        saved = SavedActivation.blob("x", quant.quantize_mask(v > 0)) if quantize else SavedActivation.full(x=v)
    return x.tape.apply("relu", [x], y, saved, tag=tag)


register_op("relu", [FULL, M1], lambda node, g, needs, tape: [quant.relu_backward(node.get("x"), g)])


# --- attention ----------------------------------------------------------------

def _swap(a):
    return np.ascontiguousarray(np.swapaxes(a, -1, -2))


def attention_scores(q, k, scale_factor, tag=None):
    """``q k^T * scale`` for ``[..., N, d]`` queries and ``[..., M, d]`` keys."""
    s = matmul(q.value, _swap(k.value)) * q.value.dtype.type(scale_factor)
    keep = {}
    if q.requires_grad:
        keep["k"] = k.value
    if k.requires_grad:
        keep["q"] = q.value
    saved = SavedActivation.full(**keep) if keep else NOSAVE
    return q.tape.apply("attention_scores", [q, k], s, saved, tag=tag, scale=scale_factor)


def _scores_backward(node, g, needs, tape):
    c = g.dtype.type(node.ctx["scale"])
    return [
        matmul(g, node.get("k")) * c if needs[0] else None,
        matmul(_swap(g), node.get("q")) * c if needs[1] else None,
    ]


register_op("attention_scores", [FULL, NONE], _scores_backward)


def attention_values(p, v, tag=None):
    """``p @ v``. Probabilities come from the producing softmax node's saved
    output when there is one, so they are not stored twice."""
    out = matmul(p.value, v.value)
    keep = {}
    if p.requires_grad:
        keep["v"] = v.value
    source = None
    if v.requires_grad:
        if p.requires_grad and p.node.op_kind == "softmax":
            source = p.id
        else:
            keep["p"] = p.value
    saved = SavedActivation.full(**keep) if keep else NOSAVE
    return p.tape.apply("attention_values", [p, v], out, saved, tag=tag, p_source=source)


def _values_backward(node, g, needs, tape):
    out = [None, None]
    if needs[0]:
        out[0] = matmul(g, _swap(node.get("v")))
    if needs[1]:
        source = node.ctx["p_source"]
        if source is None:
            p = node.get("p")
        else:
            y = tape.nodes[source].get("y")
            p = quant.dequantize(y, dtype=g.dtype) if isinstance(y, quant.QuantBlob) else y
        out[1] = matmul(_swap(p), g)
    return out


register_op("attention_values", [FULL, NONE], _values_backward)


# --- loss ---------------------------------------------------------------------

def cross_entropy(logits, labels, tag=None):
    """Mean softmax cross-entropy over the batch."""
    z = logits.value
    labels = np.asarray(labels, dtype=np.int64)
    p = quant.softmax(z)
    rows = np.arange(z.shape[0])
    logp = z[rows, labels] - z.max(axis=-1) - np.log(np.exp(z - z.max(axis=-1, keepdims=True)).sum(axis=-1))
    loss = np.asarray(-logp.mean(), dtype=z.dtype)
    saved = SavedActivation.full(p=p) if logits.requires_grad else NOSAVE
    return logits.tape.apply("cross_entropy", [logits], loss, saved, tag=tag, labels=labels)


def _ce_backward(node, g, needs, tape):
    p = node.get("p").copy()
    labels = node.ctx["labels"]
    p[np.arange(p.shape[0]), labels] -= 1
    return [p * (g / g.dtype.type(p.shape[0]))]


register_op("cross_entropy", [FULL, NONE], _ce_backward)
