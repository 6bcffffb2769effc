"""Minimal tape-based autodiff: tensors, layers, optimizers."""

from recrl.core.tensor import MASK_VALUE, Tape, Tensor, backward
from recrl.core.nn import Embedding, GRUCellParams, Linear, MLP, Module, gru_cell
from recrl.core.optim import SGD, Adam, clip_grad_norm, make_optimizer

__all__ = [
    "MASK_VALUE", "Tape", "Tensor", "backward",
    "Embedding", "GRUCellParams", "Linear", "MLP", "Module", "gru_cell",
    "SGD", "Adam", "clip_grad_norm", "make_optimizer",
]
