"""Minimal float64 autodiff, layers, Adam and a finite-difference oracle."""
from .gradcheck import fd_gradcheck
from .nn import ParamStore, backward, gru_cell, layer_norm, linear, mlp
from .optim import Adam, AdamConfig, adam_step
from .tensor import Tensor, grad, log_softmax, no_grad, softmax

__all__ = [
    "Adam", "AdamConfig", "ParamStore", "Tensor", "adam_step", "backward",
    "fd_gradcheck", "grad", "gru_cell", "layer_norm", "linear", "log_softmax",
    "mlp", "no_grad", "softmax",
]
