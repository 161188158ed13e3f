"""Dense layers and multilayer perceptrons on top of the autodiff tensor."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

ACTIVATIONS = {
    "relu": T.relu,
    "softplus": T.softplus,
    "sigmoid": T.sigmoid,
    "tanh": T.tanh,
    "none": None,
}


@dataclass
class Layer:
    weight: Tensor  # (fan_in, fan_out)
    bias: Tensor  # (fan_out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]


def mlp_forward(layers, x, skips=()) -> Tensor:
    """Affine-then-activation composition.

    ``skips`` lists layer indices whose input is the previous activation
    concatenated with the original network input.
    """
    x = T.as_tensor(x)
    h = x
    for i, layer in enumerate(layers):
        if i in skips:
            h = T.concat([h, x], axis=-1)
        if h.shape[-1] != layer.fan_in:
            raise ShapeError(
                f"mlp layer {i}: expects input width {layer.fan_in}, got {h.shape[-1]}"
            )
        h = T.linear(h, layer.weight, layer.bias)
        act = ACTIVATIONS[layer.activation]
        if act is not None:
            h = act(h)
    return h


@dataclass
class MLP:
    layers: list
    skips: tuple = field(default_factory=tuple)

    def __call__(self, x) -> Tensor:
        return mlp_forward(self.layers, x, self.skips)

    def parameters(self, prefix: str = "") -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}{i}.weight"] = layer.weight
            out[f"{prefix}{i}.bias"] = layer.bias
        return out

    @classmethod
    def build(
        cls,
        in_dim: int,
        width: int,
        depth: int,
        out_dim: int,
        rng: np.random.Generator,
        out_activation: str = "none",
        skips=(),
        out_scale: float = 1.0,
    ) -> "MLP":
        """``depth`` hidden relu layers of ``width`` followed by a linear head.

        Hidden weights are He-uniform in fan-in; the head is scaled by
        ``out_scale`` (small values start the output near zero).
        """
        skips = tuple(skips)
        layers = []
        prev = in_dim
        for i in range(depth):
            fan_in = prev + (in_dim if i in skips else 0)
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, width))
            layers.append(Layer(Tensor(w, True), Tensor(np.zeros(width), True), "relu"))
            prev = width
        fan_in = prev + (in_dim if depth in skips else 0)
        bound = out_scale * np.sqrt(1.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, out_dim))
        layers.append(Layer(Tensor(w, True), Tensor(np.zeros(out_dim), True), out_activation))
        return cls(layers, skips)
