# %% [markdown]
# # 4-bit saved activations
#
# Each nonlinearity stores only what its derivative needs. Softmax keeps its
# output, GELU keeps its clipped input, and ReLU keeps a sign mask.

# %%
import numpy as np

from memtune import quant

rng = np.random.default_rng(0)
scores = rng.normal(size=(4, 197, 197)).astype(np.float32)
y, blob = quant.softmax_forward(scores)
print("full bytes:", y.nbytes, " packed bytes:", blob.nbytes, " ratio:", blob.nbytes / y.nbytes)

err = np.abs(quant.dequantize(blob) - y).max()
print(f"max roundtrip error {err:.3e} <= bound {quant.roundtrip_bound(y, blob):.3e}")

# %% [markdown]
# ## Effect on the softmax gradient
#
# One scale covers the whole tensor and is set by the largest probability, so
# most of the small entries in a 197-wide row land on code 0. The gradient
# error is therefore large in relative terms, yet it stays inside the
# per-element bound checked by the acceptance suite.

# %%
g = rng.normal(size=y.shape).astype(np.float32)
exact = quant.softmax_backward(y, g)
approx = quant.softmax_backward(blob, g)
rel = np.linalg.norm(approx - exact) / np.linalg.norm(exact)
print(f"relative gradient error {rel:.3f}")

# %% [markdown]
# ## GELU: the sine fit on clipped inputs
#
# The largest gap to the exact derivative sits at the clip boundary.

# %%
x = np.linspace(-6, 6, 120001)
gap = quant.gelu_gap(x)
print(f"max gap {gap.max():.6f} at x = {x[gap.argmax()]:+.3f}  (recorded constant {quant.D_GELU:.6f})")
for v in (-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0):
    print(f"x={v:+.1f}  exact {quant.gelu_derivative_exact(v):+.4f}  approx {quant.gelu_derivative_approx(v):+.4f}")

# %% [markdown]
# ## ReLU loses nothing

# %%
h = rng.normal(size=100_000).astype(np.float32)
_, mask = quant.relu_forward(h)
gh = rng.normal(size=h.shape).astype(np.float32)
same = quant.relu_backward(mask, gh).tobytes() == quant.relu_backward(h, gh).tobytes()
print("mask bytes:", mask.nbytes, " bit-identical backward:", same)
