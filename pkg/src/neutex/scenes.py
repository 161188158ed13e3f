"""Datasets on disk, scene normalisation and the analytic shell scene.

Directory layout::

    root/images/0000.png   RGB, 8 bit
    root/masks/0000.png    grayscale, 0 or 255
    root/cameras.json      {"version": 1, "bbox": [[lo], [hi]]?, "views": [...]}
    root/points.ply        optional MVS-style point cloud (raw world units)
    root/oracle_truth/     written by the synthetic generator only

Each view entry holds ``image``, ``mask``, ``fx``, ``fy``, ``cx``, ``cy``,
``width``, ``height`` and ``world_from_camera`` (12 numbers, row-major 3x4).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import tensor as T
from .fields import FieldSet, FunctionNet
from .imageio import read_png, write_png
from .losses import uniform_sphere
from .pointcloud import load_point_cloud, write_point_cloud
from .renderer import TAU_CLAMP, Camera, CameraError, generate_rays, stratified_t

NORMALIZED_HALF_EXTENT = 0.9


class DataError(ValueError):
    pass


@dataclass
class Normalization:
    """x_normalized = scale * x + translation."""

    scale: float = 1.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=np.float64) + self.translation

    def apply_camera(self, cam: Camera) -> Camera:
        return Camera(cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height, cam.rotation,
                      self.apply(cam.translation))

    @classmethod
    def from_bbox(cls, lo, hi) -> "Normalization":
        lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
        center = 0.5 * (lo + hi)
        half = float(np.max(0.5 * (hi - lo)))
        if half <= 0:
            raise DataError("degenerate bounding box")
        scale = NORMALIZED_HALF_EXTENT / half
        return cls(scale, -scale * center)


def frustum_bbox(cameras) -> tuple:
    """Box around the point closest to every optical axis.

    Its half extent is the radius of the largest sphere about that point
    that stays inside every camera's field of view.
    """
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for cam in cameras:
        axis = -cam.rotation[:, 2]
        proj = np.eye(3) - np.outer(axis, axis)
        a += proj
        b += proj @ cam.translation
    center = np.linalg.lstsq(a, b, rcond=None)[0]
    radius = np.inf
    for cam in cameras:
        half_fov = min(math.atan(cam.width / (2 * cam.fx)), math.atan(cam.height / (2 * cam.fy)))
        radius = min(radius, np.linalg.norm(cam.translation - center) * math.sin(half_fov))
    return center - radius, center + radius


@dataclass
class SceneDataset:
    images: list
    masks: list
    cameras: list
    normalization: Normalization = field(default_factory=Normalization)
    points: np.ndarray | None = None
    names: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    def validate(self) -> None:
        if not (len(self.images) == len(self.masks) == len(self.cameras)):
            raise DataError(
                f"count mismatch: {len(self.images)} images, {len(self.masks)} masks, {len(self.cameras)} cameras"
            )
        for i, (img, mask, cam) in enumerate(zip(self.images, self.masks, self.cameras)):
            name = self.names[i] if i < len(self.names) else str(i)
            if img.shape[:2] != (cam.height, cam.width) or mask.shape != (cam.height, cam.width):
                raise DataError(f"view {name}: image {img.shape[:2]} / mask {mask.shape} do not match camera "
                                f"{cam.height}x{cam.width}")
            if np.all(np.abs(cam.translation) <= 1.0):
                raise DataError(f"view {name}: camera centre {cam.translation} lies inside the unit box")


def _load_mask(path: Path) -> np.ndarray:
    raw = read_png(path)
    if raw.ndim == 3:
        raw = raw[..., 0]
    bad = np.argwhere((raw != 0) & (raw != 255))
    if len(bad):
        r, c = bad[0]
        raise DataError(f"{path}: mask is not binary; pixel (row={r}, col={c}) has value {raw[r, c]}")
    return (raw == 255).astype(np.float64)


def load_dataset(root) -> SceneDataset:
    root = Path(root)
    meta_path = root / "cameras.json"
    if not meta_path.exists():
        raise DataError(f"{meta_path}: not found")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{meta_path}: {exc}") from None
    views = meta.get("views")
    if not views:
        raise DataError(f"{meta_path}: no views")
    images, masks, cameras, names = [], [], [], []
    for i, view in enumerate(views):
        img_path = root / view.get("image", f"images/{i:04d}.png")
        mask_path = root / view.get("mask", f"masks/{i:04d}.png")
        for p in (img_path, mask_path):
            if not p.exists():
                raise DataError(f"{p}: missing file for view {i}")
        try:
            cam = Camera.from_json(view)
        except (CameraError, KeyError) as exc:
            raise DataError(f"{meta_path}: view {i}: {exc}") from None
        img = read_png(img_path)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=-1)
        images.append(img[..., :3].astype(np.float64) / 255.0)
        masks.append(_load_mask(mask_path))
        cameras.append(cam)
        names.append(img_path.name)
    points = None
    if (root / "points.ply").exists():
        points = load_point_cloud(root / "points.ply")
    if "bbox" in meta:
        lo, hi = meta["bbox"]
    elif points is not None:
        lo, hi = points.min(0), points.max(0)
    else:
        lo, hi = frustum_bbox(cameras)
    norm = Normalization.from_bbox(lo, hi)
    ds = SceneDataset(images, masks, [norm.apply_camera(c) for c in cameras], norm,
                      None if points is None else norm.apply(points), names)
    ds.validate()
    return ds


def write_dataset(root, ds: SceneDataset, bbox=None, raw_points=None) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    views = []
    for i, (img, mask, cam) in enumerate(zip(ds.images, ds.masks, ds.cameras)):
        write_png(root / "images" / f"{i:04d}.png", img)
        write_png(root / "masks" / f"{i:04d}.png", mask)
        views.append({"image": f"images/{i:04d}.png", "mask": f"masks/{i:04d}.png", **cam.to_json()})
    meta = {"version": 1, "views": views}
    if bbox is not None:
        meta["bbox"] = [list(map(float, bbox[0])), list(map(float, bbox[1]))]
    (root / "cameras.json").write_text(json.dumps(meta, indent=1))
    if raw_points is not None:
        write_point_cloud(root / "points.ply", raw_points)


# ------------------------------------------------------------------ synthetic


@dataclass
class SyntheticScene:
    """Gaussian spherical shell with a procedural texture on its radial UV.

    density(x) = sigma0 * exp(-(|x| - radius)^2 / (2 thickness^2)),
    uv(x) = x / |x|, colour = pattern(uv) optionally tinted by view.
    """

    radius: float = 0.5
    thickness: float = 0.05
    sigma0: float = 50.0
    view_tint: float = 0.0
    camera_distance: float = 3.0
    fov_deg: float = 30.0

    # plain numpy versions (oracle path)

    # the operation order mirrors fieldset() so both paths agree bit for bit

    def density(self, x: np.ndarray) -> np.ndarray:
        r = np.sqrt(np.sum(x * x, axis=-1))
        return np.exp(np.square(r - self.radius) * (-1.0 / (2.0 * self.thickness * self.thickness))) * self.sigma0

    @staticmethod
    def uv(x: np.ndarray) -> np.ndarray:
        r = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
        safe = np.where(r > 0, r, 1.0)
        u = x / safe
        return np.where(r > 0, u, np.array([0.0, 0.0, 1.0]))

    @staticmethod
    def pattern(u: np.ndarray) -> np.ndarray:
        return np.stack([
            0.5 + 0.35 * np.sin(3.0 * u[..., 0] + 1.5 * u[..., 2]),
            0.5 + 0.35 * np.sin(2.5 * u[..., 1] + 0.5),
            0.5 + 0.35 * np.cos(2.0 * u[..., 2] - 1.5 * u[..., 0]),
        ], axis=-1)

    def texture(self, u: np.ndarray, d: np.ndarray) -> np.ndarray:
        c = self.pattern(u)
        if self.view_tint:
            c = np.clip(c * (1.0 + self.view_tint * np.sum(u * -d, axis=-1, keepdims=True)), 0.0, 1.0)
        return c

    def cameras(self, n_views: int, resolution: int, rng: np.random.Generator) -> list:
        """Cameras on a randomly rotated Fibonacci sphere looking at the origin."""
        i = np.arange(n_views) + 0.5
        z = 1.0 - 2.0 * i / n_views
        phi = np.pi * (1.0 + 5.0**0.5) * i
        r = np.sqrt(1.0 - z * z)
        dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        if np.linalg.det(q) < 0:
            q[:, 0] = -q[:, 0]
        dirs = dirs @ q.T
        f = 0.5 * resolution / math.tan(math.radians(self.fov_deg) / 2.0)
        c = resolution / 2.0
        return [Camera.look_at(self.camera_distance * d, [0, 0, 0], [0, 1, 0], f, f, c, c, resolution, resolution)
                for d in dirs]

    # autodiff versions (renderer path)

    def fieldset(self) -> FieldSet:
        radius, s, sigma0 = self.radius, self.thickness, self.sigma0

        def density(x):
            r = T.l2norm(x, axis=-1)
            return T.mul(T.exp(T.mul(T.square(T.sub(r, radius)), -1.0 / (2.0 * s * s))), sigma0)

        def uv(x):
            r = T.l2norm(x, axis=-1, keepdims=True)
            return T.div(x, T.as_tensor(np.where(r.data > 0, 0.0, 1.0)) + r)

        def uv_inv(u):
            return T.mul(u, radius)

        tint = self.view_tint

        def texture(u, d):
            ux, uy, uz = u[..., 0], u[..., 1], u[..., 2]
            c = T.stack([
                T.add(0.5, T.mul(T.sin(T.add(T.mul(ux, 3.0), T.mul(uz, 1.5))), 0.35)),
                T.add(0.5, T.mul(T.sin(T.add(T.mul(uy, 2.5), 0.5)), 0.35)),
                T.add(0.5, T.mul(T.cos(T.sub(T.mul(uz, 2.0), T.mul(ux, 1.5))), 0.35)),
            ], axis=-1)
            if tint:
                facing = T.neg(T.sum_(T.mul(u, d), axis=-1, keepdims=True))
                c = T.clip(T.mul(c, T.add(1.0, T.mul(facing, tint))), 0.0, 1.0)
            return c

        return FieldSet(FunctionNet(density), FunctionNet(uv), FunctionNet(uv_inv), FunctionNet(texture))


def oracle_composite(sigma: np.ndarray, color: np.ndarray, delta: np.ndarray):
    """Plain-numpy compositing; returns (rgb, weights, T_final)."""
    tau = np.minimum(sigma * delta, TAU_CLAMP)
    csum = np.cumsum(tau, axis=-1)
    excl = np.concatenate([np.zeros_like(csum[..., :1]), csum[..., :-1]], axis=-1)
    trans = np.exp(-excl)
    absorbed = np.exp(-tau)
    w = trans * (1.0 - absorbed)
    rgb = np.stack([np.sum(w * color[..., k], axis=-1) for k in range(3)], axis=-1)
    return rgb, w, trans[..., -1] * absorbed[..., -1]


def oracle_render_rays(scene: SyntheticScene, rays, n_quad: int, chunk: int = 64):
    """Midpoint quadrature of the analytic scene; returns (rgb, opacity)."""
    rgb = np.zeros((len(rays), 3))
    opacity = np.zeros(len(rays))
    idx = np.flatnonzero(rays.hit)
    for s in range(0, len(idx), chunk):
        sel = idx[s:s + chunk]
        t, delta = stratified_t(rays.t_near[sel], rays.t_far[sel], n_quad)
        o, d = rays.origins[sel], rays.directions[sel]
        x = o[:, None, :] + t[..., None] * d[:, None, :]
        sigma = scene.density(x)
        color = scene.texture(scene.uv(x), d[:, None, :])
        c, _, t_final = oracle_composite(sigma, color, delta)
        rgb[sel] = c
        opacity[sel] = 1.0 - t_final
    return rgb, opacity


def oracle_render(scene: SyntheticScene, camera: Camera, pixels=None, n_quad: int = 4096):
    """Oracle colour and opacity for ``pixels`` ((P, 2) of px, py) or the full frame."""
    if pixels is None:
        py, px = np.divmod(np.arange(camera.width * camera.height), camera.width)
    else:
        pixels = np.atleast_2d(pixels)
        px, py = pixels[:, 0], pixels[:, 1]
    rays = generate_rays(camera, px, py)
    rgb, opacity = oracle_render_rays(scene, rays, n_quad)
    if pixels is None:
        return rgb.reshape(camera.height, camera.width, 3), opacity.reshape(camera.height, camera.width)
    return rgb, opacity


def generate_synthetic(scene: SyntheticScene, n_views: int, resolution: int, rng: np.random.Generator,
                       n_quad: int = 4096, n_surface: int = 20000, n_mvs: int = 6000, mvs_noise: float = 0.01):
    """Render a posed multi-view dataset of ``scene``.

    Returns ``(dataset, truth)`` where ``truth`` holds the surface cloud, its
    analytic UVs, the noisy MVS-style cloud and the oracle opacity maps.
    """
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    cams = scene.cameras(n_views, resolution, rng)
    images, masks, opac = [], [], []
    for cam in cams:
        rgb, alpha = oracle_render(scene, cam, n_quad=n_quad)
        images.append(rgb)
        masks.append((alpha > 0.5).astype(np.float64))
        opac.append(alpha)
    surface = scene.radius * uniform_sphere(n_surface, rng)
    mvs = scene.radius * uniform_sphere(n_mvs, rng) + mvs_noise * rng.standard_normal((n_mvs, 3))
    ds = SceneDataset(images, masks, cams, Normalization(), mvs, [f"{i:04d}.png" for i in range(n_views)])
    truth = {"surface": surface, "surface_uv": scene.uv(surface), "opacity": opac}
    return ds, truth


def write_synthetic(root, scene: SyntheticScene, ds: SceneDataset, truth: dict) -> None:
    root = Path(root)
    h = NORMALIZED_HALF_EXTENT
    write_dataset(root, ds, bbox=([-h, -h, -h], [h, h, h]), raw_points=ds.points)
    od = root / "oracle_truth"
    od.mkdir(parents=True, exist_ok=True)
    write_point_cloud(od / "surface.ply", truth["surface"])
    np.save(od / "surface_uv.npy", truth["surface_uv"])
    np.save(od / "opacity.npy", np.stack(truth["opacity"]))
    (od / "scene.json").write_text(json.dumps({k: getattr(scene, k) for k in scene.__dataclass_fields__}, indent=1))


def load_scene(root) -> SyntheticScene:
    return SyntheticScene(**json.loads((Path(root) / "oracle_truth" / "scene.json").read_text()))
