"""Minimal float64 tensor substrate: autodiff, layer ops, Adam, gradient checking."""

from . import ops
from .checkpoint import load_arrays, save_arrays
from .gradcheck import grad_check
from .optim import adam_step, zero_grad
from .tensor import Parameter, Tensor, as_tensor, is_grad_enabled, no_grad

__all__ = [
    "Parameter", "Tensor", "adam_step", "as_tensor", "grad_check", "is_grad_enabled",
    "load_arrays", "no_grad", "ops", "save_arrays", "zero_grad",
]
