"""Reverse-mode autodiff with explicit saved-activation policies, PETL modules
for a toy ViT, 4-bit activation storage, and a training-memory accountant."""

from .autograd import StoragePolicy, Tape, backward, finite_diff_check, live_activation_bytes
from .memory import build_model_spec, estimate, verify_against_tape
from .model import METHODS, ToyViT, ToyViTConfig, baseline_adapters
from .quant import D_GELU, QuantBlob, dequantize, quantize
from .train import TrainConfig, adamw_step, cosine_schedule, run_finetune

__version__ = "0.1.0"
