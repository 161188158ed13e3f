"""Pinhole rays, stratified sampling in the unit box and alpha compositing.

Camera convention: ``rotation``/``translation`` map camera to world. In
camera space x points right, y up and the camera looks down -z. Pixel
``(px, py)`` has its centre at image coordinates ``(px + 0.5, py + 0.5)``
with ``py`` growing downwards.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .autodiff import tensor as T
from .autodiff.tensor import Tensor

BOX_MIN = -1.0
BOX_MAX = 1.0
# optical depth per segment is clamped here before exponentiation
TAU_CLAMP = 80.0


class CameraError(ValueError):
    pass


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        r = self.rotation
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise CameraError("camera rotation is not orthonormal with determinant +1")
        if not (self.fx > 0 and self.fy > 0):
            raise CameraError(f"focal lengths must be positive (fx={self.fx}, fy={self.fy})")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise CameraError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, cx, cy, width, height) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        back = eye - target
        back /= np.linalg.norm(back)
        right = np.cross(up, back)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross([1.0, 0.0, 0.0] if abs(back[0]) < 0.9 else [0.0, 1.0, 0.0], back)
        right /= np.linalg.norm(right)
        true_up = np.cross(back, right)
        rot = np.stack([right, true_up, back], axis=1)
        return cls(fx, fy, cx, cy, width, height, rot, eye)

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def to_json(self) -> dict:
        pose = np.concatenate([self.rotation, self.translation[:, None]], axis=1)
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
            "world_from_camera": [float(v) for v in pose.reshape(-1)],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        pose = np.asarray(d["world_from_camera"], dtype=np.float64)
        if pose.size != 12:
            raise CameraError("world_from_camera must hold 12 numbers (3x4 row-major)")
        pose = pose.reshape(3, 4)
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]), pose[:, :3], pose[:, 3])

    def directions(self, image_x, image_y) -> np.ndarray:
        """World-space unit directions through continuous image coordinates."""
        image_x = np.asarray(image_x, dtype=np.float64)
        image_y = np.asarray(image_y, dtype=np.float64)
        cam = np.stack(
            [(image_x - self.cx) / self.fx, -(image_y - self.cy) / self.fy, -np.ones_like(image_x)], axis=-1
        )
        # explicit three-term sum: a BLAS product would round differently per batch size
        r = self.rotation
        world = cam[..., :1] * r[:, 0] + cam[..., 1:2] * r[:, 1] + cam[..., 2:] * r[:, 2]
        return world / np.linalg.norm(world, axis=-1, keepdims=True)

    def project(self, points) -> np.ndarray:
        """Continuous image coordinates (x, y) of world points."""
        q = np.asarray(points, dtype=np.float64) - self.translation
        r = self.rotation
        p = q[..., :1] * r[0] + q[..., 1:2] * r[1] + q[..., 2:] * r[2]
        depth = -p[..., 2]
        return np.stack([self.fx * p[..., 0] / depth + self.cx, -self.fy * p[..., 1] / depth + self.cy], axis=-1)


@dataclass
class Rays:
    origins: np.ndarray  # (R, 3)
    directions: np.ndarray  # (R, 3)
    t_near: np.ndarray  # (R,)
    t_far: np.ndarray  # (R,)
    hit: np.ndarray  # (R,) bool

    def __len__(self) -> int:
        return len(self.origins)

    def subset(self, idx) -> "Rays":
        return Rays(self.origins[idx], self.directions[idx], self.t_near[idx], self.t_far[idx], self.hit[idx])


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float
    hit: bool


def box_intersect(origins, directions, lo=BOX_MIN, hi=BOX_MAX):
    """Slab test against the axis-aligned box; returns (t_near, t_far, hit)."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # a zero direction component inside the slab gives nan; treat as unbounded
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(np.isnan(tmin) | ((d == 0) & inside), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax) | ((d == 0) & inside), np.inf, tmax)
    tmin = np.where((d == 0) & ~inside, np.inf, tmin)
    t_near = np.maximum(tmin.max(axis=-1), 0.0)
    t_far = tmax.min(axis=-1)
    hit = t_far > t_near
    return t_near, np.where(hit, t_far, t_near), hit


def generate_rays(camera: Camera, px, py, jitter=None) -> Rays:
    """Rays through pixel centres; ``jitter`` (R, 2) in [0,1) replaces the 0.5 offset."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    if np.any(px < 0) or np.any(px >= camera.width) or np.any(py < 0) or np.any(py >= camera.height):
        raise CameraError("pixel outside image bounds")
    if jitter is None:
        ix, iy = px + 0.5, py + 0.5
    else:
        jitter = np.asarray(jitter, dtype=np.float64)
        ix, iy = px + jitter[..., 0], py + jitter[..., 1]
    dirs = np.atleast_2d(camera.directions(ix, iy))
    origins = np.broadcast_to(camera.translation, dirs.shape).copy()
    t_near, t_far, hit = box_intersect(origins, dirs)
    return Rays(origins, dirs, t_near, t_far, hit)


def generate_ray(camera: Camera, pixel, jitter: bool = False, rng=None) -> Ray:
    offset = None
    if jitter:
        rng = rng if rng is not None else np.random.default_rng()
        offset = rng.random((1, 2))
    rays = generate_rays(camera, [pixel[0]], [pixel[1]], offset)
    return Ray(rays.origins[0], rays.directions[0], float(rays.t_near[0]), float(rays.t_far[0]), bool(rays.hit[0]))


class SamplingError(ValueError):
    pass


def stratified_t(t_near, t_far, n: int, u=None):
    """Bin-stratified depths and segment lengths.

    ``u`` (R, n) in [0, 1) picks the position inside each bin; ``None``
    takes bin midpoints. The last segment runs to ``t_far``.
    """
    if n < 2:
        raise SamplingError("need at least 2 samples per ray")
    t_near = np.atleast_1d(np.asarray(t_near, dtype=np.float64))
    t_far = np.atleast_1d(np.asarray(t_far, dtype=np.float64))
    width = (t_far - t_near) / n
    offs = 0.5 if u is None else np.asarray(u, dtype=np.float64)
    t = t_near[:, None] + (np.arange(n)[None, :] + offs) * width[:, None]
    delta = np.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = t_far - t[:, -1]
    return t, delta


def sample_stratified(rays, n: int, rng=None):
    """Return (t, positions, deltas) for every ray; misses are an error.

    ``rng`` may be a Generator (one draw for the whole batch) or None for
    deterministic bin midpoints.
    """
    if isinstance(rays, Ray):
        rays = Rays(rays.origin[None], rays.direction[None], np.array([rays.t_near]), np.array([rays.t_far]),
                    np.array([rays.hit]))
    if not np.all(rays.hit):
        raise SamplingError("cannot sample a ray that misses the unit box; filter misses first")
    u = None if rng is None else rng.random((len(rays), n))
    t, delta = stratified_t(rays.t_near, rays.t_far, n, u)
    pos = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    return t, pos, delta


@dataclass
class Composite:
    rgb: Tensor  # (R, 3)
    transmittance: Tensor  # (R, N) T_1..T_N
    weights: Tensor  # (R, N)
    t_last: Tensor  # (R,) T_N, before the last segment absorbs
    t_final: Tensor  # (R,) T_{N+1}, after it


class CompositeError(ValueError):
    pass


def composite(sigma, color, delta) -> Composite:
    """Alpha-composite samples front to back.

    T_i = exp(-sum_{j<i} sigma_j delta_j), w_i = T_i (1 - exp(-sigma_i delta_i)),
    I = sum_i w_i c_i. Background is black.
    """
    sigma, color, delta = T.as_tensor(sigma), T.as_tensor(color), T.as_tensor(delta)
    if np.any(sigma.data < 0):
        raise CompositeError("negative density")
    if np.any(delta.data < 0):
        raise CompositeError("negative segment length")
    if sigma.shape != delta.shape or color.shape != sigma.shape + (3,):
        raise CompositeError(f"shape mismatch: sigma {sigma.shape}, delta {delta.shape}, color {color.shape}")
    tau = T.clip(T.mul(sigma, delta), None, TAU_CLAMP)
    trans = T.exp(T.neg(T.cumsum(tau, axis=-1, exclusive=True)))
    absorbed = T.exp(T.neg(tau))
    weights = T.mul(trans, T.sub(1.0, absorbed))
    # reduce each channel along the contiguous sample axis so the summation
    # order does not depend on how many rays share the batch
    rgb = T.stack([T.sum_(T.mul(weights, color[..., k]), axis=-1) for k in range(3)], axis=-1)
    t_last = trans[..., -1]
    t_final = T.mul(t_last, absorbed[..., -1])
    return Composite(rgb, trans, weights, t_last, t_final)


@dataclass
class RenderResult:
    """Per-ray outputs for the rays that hit the box (``index`` into the batch)."""

    index: np.ndarray
    rgb: Tensor
    t_last: Tensor
    t_final: Tensor
    weights: Tensor
    positions: np.ndarray  # (H, N, 3)
    uv: Tensor  # (H, N, 3)
    n_rays: int

    def full_rgb(self) -> np.ndarray:
        out = np.zeros((self.n_rays, 3))
        out[self.index] = self.rgb.data
        return out

    def full_transmittance(self, which: str = "post") -> np.ndarray:
        out = np.ones(self.n_rays)
        out[self.index] = (self.t_final if which == "post" else self.t_last).data
        return out


class FieldTexture:
    """Default shading: the learned texture network."""

    def shade(self, fields, u, d):
        return fields.eval_texture(u, d)


def render_rays(fields, rays: Rays, n_samples: int, rng=None, texture=None, jitter=None) -> RenderResult:
    """Evaluate the field along every hitting ray and composite.

    The view direction of all samples on a ray is the ray direction.
    ``jitter`` (R, n) overrides ``rng`` with explicit in-bin offsets.
    """
    texture = texture or FieldTexture()
    index = np.flatnonzero(rays.hit)
    hit = rays.subset(index)
    n = n_samples
    if jitter is not None:
        u = np.asarray(jitter)[index]
    elif rng is not None:
        u = rng.random((len(index), n))
    else:
        u = None
    t, delta = stratified_t(hit.t_near, hit.t_far, n, u) if len(index) else (np.zeros((0, n)), np.zeros((0, n)))
    pos = hit.origins[:, None, :] + t[..., None] * hit.directions[:, None, :]
    flat = pos.reshape(-1, 3)
    sigma = T.reshape(fields.eval_density(flat), (len(index), n))
    uv = fields.eval_uv(flat)
    dirs = np.repeat(hit.directions, n, axis=0)
    color = T.reshape(texture.shade(fields, uv, dirs), (len(index), n, 3))
    comp = composite(sigma, color, delta)
    return RenderResult(index, comp.rgb, comp.t_last, comp.t_final, comp.weights, pos,
                        T.reshape(uv, (len(index), n, 3)), len(rays))


def render_pixel(fields, camera: Camera, pixel, n_samples: int, rng=None, texture=None):
    """Return (rgb, T_final, weights, positions) for one pixel."""
    rays = generate_rays(camera, [pixel[0]], [pixel[1]])
    with T.no_grad():
        res = render_rays(fields, rays, n_samples, rng, texture)
    if not rays.hit[0]:
        return np.zeros(3), 1.0, np.zeros(0), np.zeros((0, 3))
    return res.rgb.data[0], float(res.t_final.data[0]), res.weights.data[0], res.positions[0]


def pixel_jitter(seed: int, pixel_index: np.ndarray, n: int) -> np.ndarray:
    """In-bin offsets from a stream keyed by (seed, pixel index)."""
    return np.stack([np.random.default_rng([seed, int(i)]).random(n) for i in pixel_index]) if len(pixel_index) \
        else np.zeros((0, n))


def render_image(fields, camera: Camera, n_samples: int, chunk_size: int = 4096, seed=None, texture=None,
                 threads: int = 1, attribution: bool = False, which: str = "post") -> dict:
    """Render a full frame in pixel chunks.

    ``seed=None`` samples bin midpoints; otherwise each pixel draws its own
    jitter from ``(seed, pixel index)``. Output is independent of
    ``chunk_size`` and ``threads``. With ``attribution`` the UV and position
    of each pixel's highest-weight sample are returned as well.
    """
    h, w = camera.height, camera.width
    py, px = np.divmod(np.arange(h * w), w)
    starts = list(range(0, h * w, chunk_size))

    def work(start):
        sl = slice(start, start + chunk_size)
        rays = generate_rays(camera, px[sl], py[sl])
        jit = pixel_jitter(seed, np.arange(h * w)[sl], n_samples) if seed is not None else None
        with T.no_grad():
            res = render_rays(fields, rays, n_samples, texture=texture, jitter=jit)
        out = {"rgb": res.full_rgb(), "transmittance": res.full_transmittance(which)}
        if attribution:
            top_uv = np.full((len(rays), 3), np.nan)
            top_x = np.full((len(rays), 3), np.nan)
            top_w = np.zeros(len(rays))
            if len(res.index):
                k = np.argmax(res.weights.data, axis=1)
                rows = np.arange(len(res.index))
                top_uv[res.index] = res.uv.data[rows, k]
                top_x[res.index] = res.positions[rows, k]
                top_w[res.index] = res.weights.data[rows, k]
            out.update(top_uv=top_uv, top_position=top_x, top_weight=top_w)
        return out

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]
    image = {}
    for key in parts[0]:
        arr = np.concatenate([p[key] for p in parts])
        image[key] = arr.reshape((h, w) + arr.shape[1:])
    return image
