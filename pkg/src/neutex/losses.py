"""Training losses. Per-ray quantities are averaged over the batch."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import tensor as T
from .autodiff.tensor import ShapeError, Tensor


def loss_render(pred, target) -> Tensor:
    """Squared L2 colour error per ray, averaged over rays."""
    pred = T.as_tensor(pred)
    diff = T.sub(pred, np.asarray(target, dtype=np.float64))
    return T.mean(T.sum_(T.square(diff), axis=-1))


def loss_mask(t_final, mask) -> Tensor:
    """(M - (1 - T))^2 averaged over rays."""
    opacity = T.sub(1.0, T.as_tensor(t_final))
    return T.mean(T.square(T.sub(np.asarray(mask, dtype=np.float64), opacity)))


def loss_cycle(fields, positions, weights, detach_weights: bool = True) -> Tensor:
    """sum_i w_i |uv_inv(uv(x_i)) - x_i|^2 per ray, averaged over rays.

    ``positions`` is (R, N, 3) and ``weights`` (R, N).
    """
    weights = T.as_tensor(weights)
    x = np.asarray(positions, dtype=np.float64)
    if x.shape[:-1] != weights.shape:
        raise ShapeError(f"loss_cycle: positions {x.shape} do not match weights {weights.shape}")
    if detach_weights:
        weights = weights.detach()
    flat = x.reshape(-1, 3)
    back = fields.eval_inverse_uv(fields.eval_uv(flat))
    resid = T.reshape(T.sum_(T.square(T.sub(back, flat)), axis=-1), weights.shape)
    return T.mean(T.sum_(T.mul(weights, resid), axis=-1))


def loss_cycle_from_uv(fields, uv, positions, weights, detach_weights: bool = True) -> Tensor:
    """Same as :func:`loss_cycle` but reuses UVs already computed for rendering."""
    weights = T.as_tensor(weights)
    if detach_weights:
        weights = weights.detach()
    flat = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    back = fields.eval_inverse_uv(T.reshape(uv, (-1, 3)))
    resid = T.reshape(T.sum_(T.square(T.sub(back, flat)), axis=-1), weights.shape)
    return T.mean(T.sum_(T.mul(weights, resid), axis=-1))


def nearest_indices(query: np.ndarray, points: np.ndarray) -> np.ndarray:
    return cKDTree(points).query(query, k=1)[1]


def chamfer_distance(a, b, tree_b=None) -> Tensor:
    """mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2.

    Nearest neighbours come from a k-d tree; the squared distances are then
    recomputed directly so gradients flow to whichever side requires them.
    """
    a, b = T.as_tensor(a), T.as_tensor(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer_distance: point sets must be non-empty")
    nn_ab = (tree_b or cKDTree(b.data)).query(a.data, k=1)[1]
    nn_ba = cKDTree(a.data).query(b.data, k=1)[1]
    d_ab = T.sum_(T.square(T.sub(a, T.take(b, nn_ab, axis=0))), axis=-1)
    d_ba = T.sum_(T.square(T.sub(b, T.take(a, nn_ba, axis=0))), axis=-1)
    return T.add(T.mean(d_ab), T.mean(d_ba))


def loss_cycle2(fields, uv_samples) -> Tensor:
    """mean |uv(uv_inv(u)) - u|^2 over UV samples."""
    u = np.asarray(uv_samples, dtype=np.float64)
    back = fields.eval_uv(fields.eval_inverse_uv(u))
    return T.mean(T.sum_(T.square(T.sub(back, u)), axis=-1))


def loss_total(render, cycle, mask, weights) -> Tensor:
    """render + a1 * cycle + a2 * mask; zero weights drop their term entirely."""
    total = T.as_tensor(render)
    if weights.cycle:
        total = T.add(total, T.mul(cycle, weights.cycle))
    if weights.mask:
        total = T.add(total, T.mul(mask, weights.mask))
    return total


def loss_init(chamfer, cycle2, render, mask, weights) -> Tensor:
    """chamfer + a * cycle2 + b * render + c * mask."""
    total = T.as_tensor(chamfer)
    for term, w in ((cycle2, weights.init_cycle2), (render, weights.init_render), (mask, weights.init_mask)):
        if w:
            total = T.add(total, T.mul(term, w))
    return total


def uniform_sphere(n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-uniform points on the unit sphere (uniform z, uniform azimuth)."""
    z = rng.uniform(-1.0, 1.0, n)
    phi = rng.uniform(0.0, 2.0 * np.pi, n)
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def voxel_downsample(points: np.ndarray, lo: int = 2000, hi: int = 3000) -> np.ndarray:
    """Voxel-grid downsample (one centroid per occupied cell) landing in [lo, hi].

    The cell size is bisected until the occupied-cell count falls in range;
    clouds already smaller than ``hi`` are returned unchanged.
    """
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) <= hi:
        return pts.copy()
    extent = float(np.max(pts.max(0) - pts.min(0))) or 1.0
    small, large = extent / 4096.0, extent
    best = None
    for _ in range(60):
        cell = 0.5 * (small + large)
        out = _voxel_centroids(pts, cell)
        if lo <= len(out) <= hi:
            return out
        if len(out) > hi:
            small = cell
        else:
            large = cell
        best = out
    return best


def _voxel_centroids(pts: np.ndarray, cell: float) -> np.ndarray:
    keys = np.floor((pts - pts.min(0)) / cell).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, pts)
    return sums / counts[:, None]
