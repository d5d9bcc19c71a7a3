"""Minimal float64 tensor, autodiff, layer and optimizer substrate."""

from . import tensor as ops
from .checkpoint import CheckpointError, load_params, save_params
from .layers import MLP, Embedding, Linear, Module, build_mlp
from .optim import OptimizerState, optimizer_step
from .params import ParamSet, ema_update, swap_in_ema
from .tensor import NonFiniteError, Tensor, grad, tensor

__all__ = [
    "CheckpointError",
    "Embedding",
    "Linear",
    "MLP",
    "Module",
    "NonFiniteError",
    "OptimizerState",
    "ParamSet",
    "Tensor",
    "build_mlp",
    "ema_update",
    "grad",
    "load_params",
    "ops",
    "optimizer_step",
    "save_params",
    "swap_in_ema",
    "tensor",
]
