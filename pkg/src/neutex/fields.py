"""The four networks of the disentangled radiance field.

* density:  x -> sigma >= 0           (positionally encoded input, softplus head)
* uv:       x -> u on the unit sphere (raw input, normalised 3-vector head)
* uv_inv:   u -> x in (-1, 1)^3       (raw input, tanh head)
* texture:  (u, d) -> rgb in [0, 1]   (encoded u and d, sigmoid head)

Colour reaches ``x`` only through ``uv``; density never sees ``d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import tensor as T
from .autodiff.nn import MLP
from .autodiff.tensor import Tensor
from .config import ModelConfig

UV_NORM_FLOOR = 1e-12
UNIT_TOL = 1e-6


def positional_encode(value: float, k: int) -> np.ndarray:
    """[sin(2^1 pi t), cos(2^1 pi t), ..., sin(2^k pi t), cos(2^k pi t)]."""
    out = np.empty(2 * k)
    for i in range(1, k + 1):
        out[2 * i - 2] = math.sin(2.0**i * math.pi * value)
        out[2 * i - 1] = math.cos(2.0**i * math.pi * value)
    return out


def encoded_dim(dim: int, k: int) -> int:
    return dim + 2 * k * dim


def encode(x, k: int) -> Tensor:
    """Encode the last axis: ``[x_1..x_D, gamma(x_1), ..., gamma(x_D)]``."""
    x = T.as_tensor(x)
    if k == 0:
        return x
    freqs = (2.0 ** np.arange(1, k + 1)) * np.pi
    lead = x.shape[:-1]
    dim = x.shape[-1]
    scaled = T.mul(T.reshape(x, lead + (dim, 1)), freqs)
    pairs = T.stack([T.sin(scaled), T.cos(scaled)], axis=-1)
    return T.concat([x, T.reshape(pairs, lead + (dim * 2 * k,))], axis=-1)


class FieldError(ValueError):
    pass


def _check_finite(x: Tensor, what: str) -> None:
    if not np.isfinite(x.data).all():
        raise FieldError(f"{what}: input contains non-finite values")


class DensityNet:
    def __init__(self, mlp: MLP, k: int):
        self.mlp = mlp
        self.k = k

    def __call__(self, x: Tensor) -> Tensor:
        raw = self.mlp(encode(x, self.k))
        return T.softplus(T.reshape(raw, raw.shape[:-1]))

    def parameters(self) -> dict:
        return self.mlp.parameters()


class UVNet:
    def __init__(self, mlp: MLP):
        self.mlp = mlp

    def __call__(self, x: Tensor) -> Tensor:
        return normalize_uv(self.mlp(x))

    def parameters(self) -> dict:
        return self.mlp.parameters()


def normalize_uv(raw: Tensor) -> Tensor:
    norm = T.l2norm(raw, axis=-1, keepdims=True)
    if norm.data.size and norm.data.min() < UV_NORM_FLOOR:
        raise FieldError("uv mapping produced a (near) zero vector; direction is undefined")
    return T.div(raw, norm)


class InverseUVNet:
    def __init__(self, mlp: MLP):
        self.mlp = mlp

    def __call__(self, u: Tensor) -> Tensor:
        return T.tanh(self.mlp(u))

    def parameters(self) -> dict:
        return self.mlp.parameters()


class TextureNet:
    def __init__(self, mlp: MLP, k_uv: int, k_view: int):
        self.mlp = mlp
        self.k_uv = k_uv
        self.k_view = k_view

    def __call__(self, u: Tensor, d: Tensor) -> Tensor:
        feats = T.concat([encode(u, self.k_uv), encode(d, self.k_view)], axis=-1)
        return T.sigmoid(self.mlp(feats))

    def parameters(self) -> dict:
        return self.mlp.parameters()


class FunctionNet:
    """Wrap a plain function of tensors as a parameter-free network.

    Used for analytic oracle fields and for tests that need an exact
    mapping (for instance the true inverse of a spherical shell).
    """

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, *args) -> Tensor:
        return self.fn(*args)

    def parameters(self) -> dict:
        return {}


NETWORKS = ("density", "uv", "uv_inv", "texture")


@dataclass
class FieldSet:
    density: object
    uv: object
    uv_inv: object
    texture: object
    model: ModelConfig | None = None

    # -- construction -------------------------------------------------------

    @classmethod
    def from_config(cls, model: ModelConfig, seed: int = 0) -> "FieldSet":
        rng = np.random.default_rng([seed, 0x7E])
        pos_dim = encoded_dim(3, model.k_position)
        tex_dim = encoded_dim(3, model.k_uv) + encoded_dim(3, model.k_view)
        d, u, ui, t = model.density, model.uv, model.uv_inv, model.texture
        density = DensityNet(MLP.build(pos_dim, d.width, d.depth, 1, rng, skips=d.skips), model.k_position)
        uv = UVNet(MLP.build(3, u.width, u.depth, 3, rng, skips=u.skips))
        uv_inv = InverseUVNet(
            MLP.build(3, ui.width, ui.depth, 3, rng, skips=ui.skips, out_scale=model.uv_inv_out_scale)
        )
        texture = TextureNet(MLP.build(tex_dim, t.width, t.depth, 3, rng, skips=t.skips), model.k_uv, model.k_view)
        return cls(density, uv, uv_inv, texture, model)

    # -- parameters ---------------------------------------------------------

    def parameters(self, networks=NETWORKS) -> dict:
        out = {}
        for name in networks:
            for key, p in getattr(self, name).parameters().items():
                out[f"{name}.{key}"] = p
        return out

    def state_arrays(self) -> dict:
        return {k: p.data for k, p in self.parameters().items()}

    def load_arrays(self, arrays: dict) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise FieldError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for k, p in params.items():
            if p.shape != arrays[k].shape:
                raise FieldError(f"parameter {k}: shape {arrays[k].shape} does not match model {p.shape}")
            p.data = np.array(arrays[k], dtype=np.float64)

    def set_trainable(self, networks) -> None:
        """Only parameters of ``networks`` record gradients."""
        for name in NETWORKS:
            for p in getattr(self, name).parameters().values():
                p.requires_grad = name in networks

    # -- evaluation ---------------------------------------------------------

    def eval_density(self, x) -> Tensor:
        x = T.as_tensor(x)
        _check_finite(x, "eval_density")
        return self.density(x)

    def eval_uv(self, x) -> Tensor:
        x = T.as_tensor(x)
        _check_finite(x, "eval_uv")
        return self.uv(x)

    def eval_inverse_uv(self, u) -> Tensor:
        u = T.as_tensor(u)
        _check_finite(u, "eval_inverse_uv")
        return self.uv_inv(u)

    def eval_texture(self, u, d) -> Tensor:
        u, d = T.as_tensor(u), T.as_tensor(d)
        _check_finite(u, "eval_texture")
        norms = np.linalg.norm(d.data, axis=-1)
        if norms.size and np.max(np.abs(norms - 1.0)) > UNIT_TOL:
            raise FieldError("eval_texture: view direction is not unit length")
        if d.shape != u.shape:
            d = T.broadcast(d, u.shape)
        return self.texture(u, d)

    def eval_radiance_field(self, x, d):
        """(sigma, rgb) = (density(x), texture(uv(x), d))."""
        return self.eval_density(x), self.eval_texture(self.eval_uv(x), d)
