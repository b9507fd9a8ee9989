"""Minimal float64 tensor kernel: reverse-mode tape, Adam, seeded streams."""
from . import ops
from .gradcheck import grad_check
from .ops import (
    bce_with_logits,
    cross_entropy,
    kl_diag_gaussian,
    matmul,
    softmax,
)
from .optim import Adam, AdamState, OptimizerError, adam_step, clip_global_norm
from .rng import Rng
from .tensor import NumericError, Tape, TapeError, Tensor, no_tape

__all__ = [
    "Adam", "AdamState", "NumericError", "OptimizerError", "Rng", "Tape", "TapeError",
    "Tensor", "adam_step", "bce_with_logits", "clip_global_norm", "cross_entropy",
    "grad_check", "kl_diag_gaussian", "matmul", "no_tape", "ops", "softmax",
]
