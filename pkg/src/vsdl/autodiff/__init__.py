"""Minimal reverse-mode autodiff core used by the vsdl networks."""
from .adam import Adam, AdamState, adam_step
from .ops import (LSTMParams, activation, bce_loss, conv2d, conv3d, dense, flatten,
                  lstm_cell, maxpool2d, maxpool3d, multilayer_lstm, relu, sigmoid, tanh)
from .tensor import (Tensor, add, backward, default_dtype, float64_mode, getitem, grad_enabled,
                     matmul, mean, mul, no_grad, reshape, scale, stack, sub, tsum)

__all__ = [
    "Adam", "AdamState", "LSTMParams", "Tensor", "activation", "adam_step", "add", "backward",
    "bce_loss", "conv2d", "conv3d", "default_dtype", "dense", "flatten", "float64_mode",
    "getitem", "grad_enabled", "lstm_cell", "matmul", "maxpool2d", "maxpool3d", "mean", "mul",
    "multilayer_lstm", "no_grad", "relu", "reshape", "scale", "sigmoid", "stack", "sub", "tanh", "tsum",
]
