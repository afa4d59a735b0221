# %% [markdown]
# # Where training memory goes
#
# The accountant adds up weights, gradients, AdamW moments and the activations
# each layer keeps for backward. Comparing methods on ViT-B/16 at batch 32 shows
# that the activation term dominates everything except the linear probe.

# %%
from memtune.memory import build_model_spec, estimate, estimate_method, format_summary_table, verify_against_tape
from memtune.model import METHODS, ToyViT, ToyViTConfig

reports = [estimate_method("vit_b_16", m, 32) for m in METHODS]
print(format_summary_table(reports))

# %% [markdown]
# Break the S2A total into its parts. With every backbone weight frozen, the
# backbone linears keep nothing for backward. Softmax and GELU keep 4-bit codes.

# %%
s2a = estimate_method("vit_b_16", "S2A", 32)
for label, value in [("weights", s2a.weight_bytes), ("grad + adam", s2a.gradient_bytes + s2a.optimizer_bytes),
                     ("activations", s2a.activation_bytes), ("quant overhead", s2a.quant_overhead_bytes)]:
    print(f"{label:<15} {value / 2**20:9.1f} MB")

# "aux" rows (attention matmul operands, layernorm statistics, loss) are
# reported separately and kept out of the headline total.
heaviest = sorted(s2a.rows, key=lambda r: r.activation_bytes, reverse=True)
for scope in ("core", "aux"):
    for row in [r for r in heaviest if r.scope == scope][:4]:
        print(f"{scope:<5} {row.name:<32} {row.policy:<7} {row.activation_bytes / 2**20:8.2f} MB")

# %% [markdown]
# ## Prediction against measurement
#
# The toy ViT runs through the real tape. The per-layer bytes the tape stored
# should match what the accountant predicted for the same layer names.

# %%
for method in METHODS:
    report = verify_against_tape(ToyViT(ToyViTConfig(method=method)), batch=32)
    print(f"{method:<9} predicted {report.predicted_total:>9}  measured {report.measured_total:>9}  ok={report.ok}")

# %% [markdown]
# Doubling the batch doubles every activation term and leaves the rest alone.

# %%
a = estimate(build_model_spec("vit_b_16", 32, "S2A"))
b = estimate(build_model_spec("vit_b_16", 64, "S2A"))
print(b.activation_bytes / a.activation_bytes, b.weight_bytes == a.weight_bytes)
