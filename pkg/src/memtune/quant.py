"""Low-bit saved state for non-parametric layers.

Forward passes always run at full precision. What gets *kept* for backward
is chosen from the structure of each layer's derivative:

* softmax keeps its output ``y`` (the Jacobian is a function of ``y`` only),
  4-bit affine quantized;
* ReLU keeps a 1-bit ``x > 0`` mask, which is lossless for its derivative;
* GELU keeps its input clipped to ``[-2, 2]``, 4-bit quantized, and the
  backward uses a sigmoid-plus-sine fit of the derivative.

Blob wire layout (little endian)::

    bits  u8 | rank u8 | dims u32 * rank | scale f32 | min f32 | payload

The 4-bit payload holds two codes per byte, low nibble first; the 1-bit
payload holds eight mask bits per byte, least significant bit first.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError

GELU_ALPHA = 1.702
GELU_CLIP = 2.0
SINE_AMPLITUDE = 0.22
SINE_FREQUENCY = 1.5

# sup over x in [-6, 6] of |approx(x) - exact(x)|, measured once with a 50-digit
# mpmath oracle on a 120001-point grid; attained at the clip edge x = 2
D_GELU = 0.0749396409632671


class NumericError(ArithmeticError):
    pass


class BlobFormatError(ValueError):
    pass


@dataclass(frozen=True)
class QuantBlob:
    packed: bytes
    scale: float
    minimum: float
    shape: tuple
    bits: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def nbytes(self) -> int:
        """Storage cost: payload plus the two float32 range fields for 4-bit blobs."""
        if self.bits == 1:
            return len(self.packed)
        return len(self.packed) + 8

    def codes(self) -> np.ndarray:
        n = self.size
        expected = packed_length(n, self.bits)
        if len(self.packed) != expected:
            raise BlobFormatError(
                f"{self.bits}-bit blob for shape {self.shape} needs {expected} payload bytes, "
                f"found {len(self.packed)}")
        raw = np.frombuffer(self.packed, dtype=np.uint8)
        if self.bits == 4:
            return unpack_nibbles(raw, n)
        return unpack_bits(raw, n)

    def to_bytes(self) -> bytes:
        header = struct.pack("<BB", self.bits, len(self.shape))
        header += struct.pack(f"<{len(self.shape)}I", *self.shape)
        header += struct.pack("<ff", self.scale, self.minimum)
        return header + self.packed

    @classmethod
    def from_bytes(cls, data: bytes) -> "QuantBlob":
        if len(data) < 2:
            raise BlobFormatError("blob shorter than its 2-byte header")
        bits, rank = struct.unpack_from("<BB", data, 0)
        if bits not in (1, 4):
            raise BlobFormatError(f"unsupported bit width {bits} at byte 0")
        offset = 2
        if len(data) < offset + 4 * rank + 8:
            raise BlobFormatError(f"truncated header: need {offset + 4 * rank + 8} bytes, have {len(data)}")
        shape = struct.unpack_from(f"<{rank}I", data, offset)
        offset += 4 * rank
        scale, minimum = struct.unpack_from("<ff", data, offset)
        offset += 8
        blob = cls(bytes(data[offset:]), scale, minimum, tuple(shape), bits)
        blob.codes()  # validates payload length
        return blob


def packed_length(n: int, bits: int) -> int:
    if bits == 4:
        return (n + 1) // 2
    if bits == 1:
        return (n + 7) // 8
    raise ValueError(f"no packing defined for {bits}-bit codes")


def pack_nibbles(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint8).ravel()
    if codes.size and codes.max() > 15:
        raise ValueError("4-bit codes must lie in [0, 15]")
    if codes.size % 2:
        codes = np.append(codes, np.uint8(0))
    return (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8)


def unpack_nibbles(packed: np.ndarray, n: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    out = np.empty(packed.size * 2, dtype=np.uint8)
    out[0::2] = packed & 0x0F
    out[1::2] = packed >> 4
    return out[:n]


def pack_bits(mask: np.ndarray) -> np.ndarray:
    return np.packbits(np.asarray(mask, dtype=bool).ravel(), bitorder="little")


def unpack_bits(packed: np.ndarray, n: int) -> np.ndarray:
    return np.unpackbits(np.asarray(packed, dtype=np.uint8), count=n, bitorder="little")


def _affine_codes(t: np.ndarray, bits: int):
    """Per-tensor asymmetric quantization; returns (codes, scale, minimum)."""
    t = np.asarray(t)
    if not np.all(np.isfinite(t)):
        raise NumericError("cannot quantize a tensor containing NaN or Inf")
    levels = (1 << bits) - 1
    t32 = t.astype(np.float32)
    lo = np.float64(t32.min())
    hi = np.float64(t32.max())
    if hi == lo:
        return np.zeros(t.shape, dtype=np.uint8), 0.0, float(np.float32(lo))
    scale = np.float32((hi - lo) / levels)
    # keep the stored scale <= the exact one so the top code never exceeds `levels`
    if np.float64(scale) > (hi - lo) / levels:
        scale = np.nextafter(scale, np.float32(0))
    if scale == 0:
        scale = np.nextafter(np.float32(0), np.float32(1))
    v = (t32.astype(np.float64) - lo) / np.float64(scale)
    codes = np.clip(np.floor(v + 0.5), 0, levels)  # half away from zero (v >= 0)
    return codes.astype(np.uint8 if bits <= 8 else np.uint16), float(scale), float(lo)


def quantize(t: np.ndarray, bits: int = 4) -> QuantBlob:
    if bits != 4:
        raise ValueError(f"activation quantization is 4-bit, got bits={bits}")
    codes, scale, minimum = _affine_codes(t, bits)
    return QuantBlob(pack_nibbles(codes).tobytes(), scale, minimum, tuple(np.shape(t)), bits)


def quantize_mask(mask: np.ndarray) -> QuantBlob:
    mask = np.asarray(mask, dtype=bool)
    return QuantBlob(pack_bits(mask).tobytes(), 1.0, 0.0, mask.shape, 1)


def dequantize(q: QuantBlob, dtype=np.float32) -> np.ndarray:
    codes = q.codes().astype(np.float64)
    y = codes * np.float64(np.float32(q.scale)) + np.float64(np.float32(q.minimum))
    return y.astype(dtype).reshape(q.shape)


def _unpack_saved(saved, dtype):
    if isinstance(saved, QuantBlob):
        return dequantize(saved, dtype=dtype)
    return np.asarray(saved)


def _check_shapes(a_shape, g):
    if tuple(a_shape) != tuple(np.shape(g)):
        raise DimensionError(f"saved state shape {tuple(a_shape)} does not match gradient {np.shape(g)}")


# --- softmax ---------------------------------------------------------------

def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_forward(x: np.ndarray):
    y = softmax(x)
    return y, quantize(y, 4)


def softmax_grad(y: np.ndarray, g_y: np.ndarray) -> np.ndarray:
    # Jacobian-vector product contracted per row: y * (g - <g, y>)
    return y * (g_y - (g_y * y).sum(axis=-1, keepdims=True))


def softmax_backward(saved, g_y: np.ndarray) -> np.ndarray:
    """Input gradient from a saved softmax output (blob or exact tensor)."""
    shape = saved.shape if isinstance(saved, QuantBlob) else np.shape(saved)
    _check_shapes(shape, g_y)
    return softmax_grad(_unpack_saved(saved, g_y.dtype), g_y)


# --- ReLU ------------------------------------------------------------------

def relu_forward(x: np.ndarray):
    return np.maximum(x, 0).astype(x.dtype, copy=False), quantize_mask(x > 0)


def relu_backward(saved, g_y: np.ndarray) -> np.ndarray:
    if isinstance(saved, QuantBlob):
        _check_shapes(saved.shape, g_y)
        mask = saved.codes().reshape(saved.shape).astype(bool)
    else:
        _check_shapes(np.shape(saved), g_y)
        mask = np.asarray(saved) > 0
    return np.where(mask, g_y, np.zeros((), dtype=g_y.dtype))


# --- GELU ------------------------------------------------------------------

def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gelu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(GELU_ALPHA * x)


def gelu_derivative_exact(x):
    s = sigmoid(GELU_ALPHA * x)
    return s + GELU_ALPHA * x * s * (1.0 - s)


def gelu_derivative_approx(x):
    """Sigmoid term plus a one-period sine in place of the odd correction term.

    ``x`` is clipped to ``[-2, 2]`` first, matching what the forward pass saves.
    """
    xc = np.clip(x, -GELU_CLIP, GELU_CLIP)
    return sigmoid(GELU_ALPHA * xc) + SINE_AMPLITUDE * np.sin(SINE_FREQUENCY * xc)


def gelu_forward(x: np.ndarray):
    return gelu(x), quantize(np.clip(x, -GELU_CLIP, GELU_CLIP), 4)


def gelu_backward(saved, g_y: np.ndarray) -> np.ndarray:
    """Input gradient from saved GELU state.

    A blob is dequantized and fed to the sine approximation; an exact tensor
    uses the exact derivative.
    """
    if isinstance(saved, QuantBlob):
        _check_shapes(saved.shape, g_y)
        xh = dequantize(saved, dtype=g_y.dtype)
        return g_y * gelu_derivative_approx(xh).astype(g_y.dtype, copy=False)
    _check_shapes(np.shape(saved), g_y)
    return g_y * gelu_derivative_exact(np.asarray(saved)).astype(g_y.dtype, copy=False)


def gelu_gap(x):
    return np.abs(gelu_derivative_approx(x) - gelu_derivative_exact(x))


def ulp(x) -> float:
    return float(np.spacing(np.float32(abs(x))))


def roundtrip_bound(t: np.ndarray, blob: QuantBlob) -> float:
    """Per-element error allowance s/2 + 1 ulp of the tensor's largest magnitude."""
    peak = max(abs(float(np.min(t))), abs(float(np.max(t)))) if np.size(t) else 0.0
    return blob.scale / 2 + ulp(peak)
