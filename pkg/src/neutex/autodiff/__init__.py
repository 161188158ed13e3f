from .checkpoint import load_checkpoint, save_checkpoint
from .nn import MLP, Layer, mlp_forward
from .optim import AdamState, adam_step
from .tensor import (
    GraphError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    gradients,
    no_grad,
    tensor_op,
)

__all__ = [
    "AdamState",
    "GraphError",
    "Layer",
    "MLP",
    "ShapeError",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "gradients",
    "load_checkpoint",
    "mlp_forward",
    "no_grad",
    "save_checkpoint",
    "tensor_op",
]
