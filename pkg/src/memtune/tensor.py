"""Dense tensor helpers and the raw kernels the autodiff layer is built on.

A tensor here is a plain row-major ``numpy.ndarray``. The engine computes in
float32; float64 is accepted everywhere so that gradient checks can run
without float32 round-off swamping the finite differences.
"""

import numpy as np

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested kernel."""


class UnsupportedKernelError(ValueError):
    pass


def as_tensor(x, dtype=None) -> np.ndarray:
    arr = np.asarray(x)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
    return np.ascontiguousarray(arr, dtype=dtype)


def _result_dtype(*arrays):
    return np.result_type(*[a.dtype for a in arrays])


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes.

    ``a`` is ``[..., m, k]``; ``b`` is either ``[k, n]`` (shared across the
    leading axes) or ``[..., k, n]`` with the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} x {b.shape}")
    return np.matmul(a, b).astype(_result_dtype(a, b), copy=False)


def pointwise_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """1x1 convolution over tokens: ``x[..., C_in] @ w[C_in, C_out] + b``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"pointwise_conv channel mismatch: x {x.shape}, w {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"pointwise_conv bias {b.shape} does not match w {w.shape}")
    lead = x.shape[:-1]
    y = matmul(x.reshape(-1, x.shape[-1]), w) + b
    return y.reshape(*lead, w.shape[1])


def _check_depthwise(x, kernel):
    if kernel.ndim != 3 or kernel.shape[:2] != (3, 3):
        raise UnsupportedKernelError(f"depthwise_conv supports 3x3 kernels only, got {kernel.shape}")
    if x.ndim < 3 or x.shape[-1] != kernel.shape[2]:
        raise DimensionError(f"depthwise_conv channel mismatch: x {x.shape}, kernel {kernel.shape}")


def _pad_grid(x):
    pad = [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    return np.pad(x, pad)


def depthwise_conv(x: np.ndarray, kernel: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-channel 3x3 convolution, stride 1, zero padding 1.

    ``x`` is ``[..., H, W, C]``, ``kernel`` is ``[3, 3, C]``. Channels never mix.
    """
    _check_depthwise(x, kernel)
    if b.shape != (kernel.shape[2],):
        raise DimensionError(f"depthwise_conv bias {b.shape} does not match kernel {kernel.shape}")
    h, w = x.shape[-3], x.shape[-2]
    xp = _pad_grid(x)
    out = np.zeros(x.shape, dtype=_result_dtype(x, kernel))
    for di in range(3):
        for dj in range(3):
            out += xp[..., di:di + h, dj:dj + w, :] * kernel[di, dj]
    return out + b


def depthwise_conv_input_grad(g: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # adjoint of depthwise_conv w.r.t. x: correlate with the flipped kernel
    _check_depthwise(g, kernel)
    return depthwise_conv(g, kernel[::-1, ::-1, :], np.zeros(kernel.shape[2], dtype=kernel.dtype))


def depthwise_conv_kernel_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    h, w, c = x.shape[-3:]
    xp = _pad_grid(x)
    lead = tuple(range(x.ndim - 3))
    gk = np.empty((3, 3, c), dtype=_result_dtype(x, g))
    for di in range(3):
        for dj in range(3):
            gk[di, dj] = (xp[..., di:di + h, dj:dj + w, :] * g).sum(axis=lead + (x.ndim - 3, x.ndim - 2))
    return gk


def concat_last_dim(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat_last_dim leading dimensions differ: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=-1)
