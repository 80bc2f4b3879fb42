"""Minimal dense numeric core: autodiff tensors, MLPs, losses, Adam, checkpoints."""
from .autograd import (
    DimensionError,
    Tensor,
    backward,
    bce_with_logits,
    concat,
    gather_rows,
    log_softmax,
    matmul,
    max_relative,
    no_grad,
    parameter,
    relu,
    smooth_l1,
    tmax,
)
from .checkpoint import CheckpointError, load_into, read_checkpoint, save_checkpoint
from .layers import MLP, Linear, Module, init_weights, mlp_forward
from .optim import Adam, AdamState, adam_step

__all__ = [
    "Adam",
    "AdamState",
    "CheckpointError",
    "DimensionError",
    "Linear",
    "MLP",
    "Module",
    "Tensor",
    "adam_step",
    "backward",
    "bce_with_logits",
    "concat",
    "gather_rows",
    "init_weights",
    "load_into",
    "log_softmax",
    "matmul",
    "max_relative",
    "mlp_forward",
    "no_grad",
    "parameter",
    "read_checkpoint",
    "relu",
    "save_checkpoint",
    "smooth_l1",
    "tmax",
]
