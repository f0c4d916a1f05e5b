"""Minimal dense tensors with reverse-mode differentiation."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .ops import (
    add,
    as_tensor,
    batch_norm,
    concat,
    conv3d,
    conv_transpose3d,
    l1_loss,
    mean,
    mul,
    relu,
    replication_pad3d,
    scale,
    sigmoid,
    spectral_norm,
    squared_error,
    sum,
)
from .optim import Adam, adam_step
from .tensor import Tape, Tensor, default_dtype, grad_enabled, no_grad, precision

__all__ = [
    "Adam",
    "CheckpointError",
    "Tape",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "batch_norm",
    "concat",
    "conv3d",
    "conv_transpose3d",
    "default_dtype",
    "grad_enabled",
    "l1_loss",
    "load_checkpoint",
    "mean",
    "mul",
    "no_grad",
    "precision",
    "relu",
    "replication_pad3d",
    "save_checkpoint",
    "scale",
    "sigmoid",
    "spectral_norm",
    "squared_error",
    "sum",
]
