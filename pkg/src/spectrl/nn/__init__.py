"""Differentiable-computation core: tape autodiff, parameters, layers, losses."""

from spectrl.nn import layers, losses, params, tape
from spectrl.nn.params import Adam, ParamStore
from spectrl.nn.tape import Tape, Tensor, no_grad, record

__all__ = [
    "Adam",
    "ParamStore",
    "Tape",
    "Tensor",
    "layers",
    "losses",
    "no_grad",
    "params",
    "record",
    "tape",
]
