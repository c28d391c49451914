from . import functional
from .nn import BatchNorm2d, Conv2d, ConvBNReLU, LayerNorm, Linear, Module, Parameter, ReLU, Sequential
from .optim import SGD, ParamGroup
from .tensor import (
    FrozenTapeError,
    ShapeError,
    Tape,
    Tensor,
    default_dtype,
    get_default_dtype,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "functional", "Tensor", "Tape", "Parameter", "Module", "Sequential", "Conv2d", "BatchNorm2d",
    "LayerNorm", "Linear", "ReLU", "ConvBNReLU", "SGD", "ParamGroup", "ShapeError", "FrozenTapeError",
    "default_dtype", "get_default_dtype", "set_default_dtype", "no_grad",
]
