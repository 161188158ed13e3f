"""Cubemap textures over the spherical UV domain.

Face order is +X, -X, +Y, -Y, +Z, -Z. A direction ``u`` is centrally
projected onto the face of its dominant axis; within a face

    point = N + (2s - 1) S + (2t - 1) Tv

with (N, S, Tv) from ``FACE_FRAMES`` below (for example +Z: s runs along
+x, t along +y). Rasters are stored ``[face, row, col, channel]`` with
``s = (col + 0.5) / R`` and ``t = 1 - (row + 0.5) / R`` so +t points up in
the saved images. The cross composite lays faces out as

    .   +Y  .   .
    -X  +Z  +X  -Z
    .   -Y  .   .
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import tensor as T
from .imageio import read_pfm, read_png, write_obj, write_pfm, write_png

FACE_NAMES = ("+X", "-X", "+Y", "-Y", "+Z", "-Z")
FILE_NAMES = ("px", "nx", "py", "ny", "pz", "nz")
FACE_FRAMES = np.array([
    # normal,      s axis,        t axis
    [[1, 0, 0], [0, 0, -1], [0, 1, 0]],
    [[-1, 0, 0], [0, 0, 1], [0, 1, 0]],
    [[0, 1, 0], [1, 0, 0], [0, 0, -1]],
    [[0, -1, 0], [1, 0, 0], [0, 0, 1]],
    [[0, 0, 1], [1, 0, 0], [0, 1, 0]],
    [[0, 0, -1], [-1, 0, 0], [0, 1, 0]],
], dtype=np.float64)
CROSS_LAYOUT = {2: (0, 1), 1: (1, 0), 4: (1, 1), 0: (1, 2), 5: (1, 3), 3: (2, 1)}
COVERAGE_RESOLUTION = 64


def dir_to_cubemap(u):
    """Map unit directions (..., 3) to (face, s, t); ties go to the earlier face."""
    u = np.asarray(u, dtype=np.float64)
    a = np.abs(u)
    axis = np.where((a[..., 0] >= a[..., 1]) & (a[..., 0] >= a[..., 2]), 0,
                    np.where(a[..., 1] >= a[..., 2], 1, 2))
    comp = np.take_along_axis(u, axis[..., None], axis=-1)[..., 0]
    face = 2 * axis + (comp < 0)
    frames = FACE_FRAMES[face]
    major = np.abs(comp)
    s = (np.sum(u * frames[..., 1, :], axis=-1) / major + 1.0) * 0.5
    t = (np.sum(u * frames[..., 2, :], axis=-1) / major + 1.0) * 0.5
    return face, np.clip(s, 0.0, 1.0), np.clip(t, 0.0, 1.0)


def cubemap_to_dir(face, s, t):
    face = np.asarray(face)
    frames = FACE_FRAMES[face]
    s = np.asarray(s, dtype=np.float64)[..., None]
    t = np.asarray(t, dtype=np.float64)[..., None]
    p = frames[..., 0, :] + (2.0 * s - 1.0) * frames[..., 1, :] + (2.0 * t - 1.0) * frames[..., 2, :]
    return p / np.linalg.norm(p, axis=-1, keepdims=True)


def texel_centers(resolution: int):
    """(face, row, col) grids and their directions, each shaped (6, R, R[, 3])."""
    r = resolution
    face, row, col = np.meshgrid(np.arange(6), np.arange(r), np.arange(r), indexing="ij")
    s = (col + 0.5) / r
    t = 1.0 - (row + 0.5) / r
    return face, s, t, cubemap_to_dir(face, s, t)


def _lerp(a, b, f):
    # exact when a == b, so constant textures sample back bit-for-bit
    return a + (b - a) * f


@dataclass
class CubemapTexture:
    faces: np.ndarray  # (6, R, R, C)

    def __post_init__(self):
        self.faces = np.asarray(self.faces, dtype=np.float64)
        if self.faces.ndim == 3:
            self.faces = self.faces[..., None]
        if self.faces.shape[0] != 6 or self.faces.shape[1] != self.faces.shape[2]:
            raise ValueError(f"cubemap needs six square faces, got {self.faces.shape}")

    @property
    def resolution(self) -> int:
        return self.faces.shape[1]

    @classmethod
    def constant(cls, value, resolution: int = 1) -> "CubemapTexture":
        value = np.atleast_1d(np.asarray(value, dtype=np.float64))
        return cls(np.broadcast_to(value, (6, resolution, resolution, len(value))).copy())

    def sample(self, u, mode: str = "bilinear") -> np.ndarray:
        """Look up directions; filtering stays within the face (clamp to edge)."""
        face, s, t = dir_to_cubemap(u)
        return self.sample_face(face, s, t, mode)

    def sample_face(self, face, s, t, mode: str = "bilinear") -> np.ndarray:
        r = self.resolution
        x = s * r - 0.5  # column coordinate
        y = (1.0 - t) * r - 0.5  # row coordinate
        if mode == "nearest":
            col = np.clip(np.floor(x + 0.5), 0, r - 1).astype(int)
            row = np.clip(np.floor(y + 0.5), 0, r - 1).astype(int)
            return self.faces[face, row, col]
        x = np.clip(x, 0.0, r - 1.0)
        y = np.clip(y, 0.0, r - 1.0)
        c0 = np.floor(x).astype(int)
        r0 = np.floor(y).astype(int)
        c1 = np.minimum(c0 + 1, r - 1)
        r1 = np.minimum(r0 + 1, r - 1)
        fx = (x - c0)[..., None]
        fy = (y - r0)[..., None]
        top = _lerp(self.faces[face, r0, c0], self.faces[face, r0, c1], fx)
        bot = _lerp(self.faces[face, r1, c0], self.faces[face, r1, c1], fx)
        return _lerp(top, bot, fy)

    def cross(self, fill: float = 0.0) -> np.ndarray:
        r = self.resolution
        out = np.full((3 * r, 4 * r, self.faces.shape[-1]), fill)
        for f, (row, col) in CROSS_LAYOUT.items():
            out[row * r:(row + 1) * r, col * r:(col + 1) * r] = self.faces[f]
        return out

    @classmethod
    def from_cross(cls, img: np.ndarray) -> "CubemapTexture":
        img = np.asarray(img, dtype=np.float64)
        r = img.shape[1] // 4
        if img.shape[0] != 3 * r or img.shape[1] != 4 * r:
            raise ValueError(f"cross image must be 3R x 4R, got {img.shape[:2]}")
        faces = np.empty((6, r, r) + img.shape[2:])
        for f, (row, col) in CROSS_LAYOUT.items():
            faces[f] = img[row * r:(row + 1) * r, col * r:(col + 1) * r]
        return cls(faces)

    def save(self, out_dir, manifest: dict | None = None) -> None:
        """Six face PNGs and PFMs, the cross composite, and a JSON manifest."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rgb = self.faces if self.faces.shape[-1] == 3 else np.repeat(self.faces[..., :1], 3, axis=-1)
        for f, name in enumerate(FILE_NAMES):
            write_png(out / f"{name}.png", rgb[f])
            write_pfm(out / f"{name}.pfm", rgb[f])
        write_png(out / "cross.png", self.cross_rgb())
        info = {"faces": list(FILE_NAMES), "face_order": list(FACE_NAMES), "resolution": self.resolution,
                "convention": "point = N + (2s-1) S + (2t-1) T; s=(col+0.5)/R, t=1-(row+0.5)/R",
                "frames": {n: FACE_FRAMES[i].tolist() for i, n in enumerate(FACE_NAMES)},
                "cross_layout": {FACE_NAMES[f]: list(v) for f, v in CROSS_LAYOUT.items()}}
        info.update(manifest or {})
        (out / "manifest.json").write_text(json.dumps(info, indent=1))

    def cross_rgb(self) -> np.ndarray:
        c = self.cross()
        return c if c.shape[-1] == 3 else np.repeat(c[..., :1], 3, axis=-1)

    @classmethod
    def load(cls, path) -> "CubemapTexture":
        """A directory of face PFMs/PNGs, or a single cross-composite image file."""
        path = Path(path)
        if path.is_dir():
            faces = []
            for name in FILE_NAMES:
                if (path / f"{name}.pfm").exists():
                    faces.append(read_pfm(path / f"{name}.pfm"))
                else:
                    faces.append(read_png(path / f"{name}.png").astype(np.float64) / 255.0)
            return cls(np.stack(faces))
        if path.suffix.lower() == ".pfm":
            return cls.from_cross(read_pfm(path))
        return cls.from_cross(read_png(path).astype(np.float64) / 255.0)


# ----------------------------------------------------------- equirectangular


def equirect_directions(width: int, height: int) -> np.ndarray:
    """Unit directions at pixel centres; longitude 0 faces +z, +y is up."""
    j = (np.arange(width) + 0.5) / width
    i = (np.arange(height) + 0.5) / height
    lon = j * 2.0 * np.pi - np.pi
    lat = 0.5 * np.pi - i * np.pi
    lat, lon = np.meshgrid(lat, lon, indexing="ij")
    return np.stack([np.cos(lat) * np.sin(lon), np.sin(lat), np.cos(lat) * np.cos(lon)], axis=-1)


def cubemap_to_equirect(cubemap: CubemapTexture, width: int, height: int) -> np.ndarray:
    return cubemap.sample(equirect_directions(width, height))


def sample_equirect(img: np.ndarray, u) -> np.ndarray:
    """Bilinear lookup with longitude wrap-around and clamped latitude."""
    h, w = img.shape[:2]
    u = np.asarray(u, dtype=np.float64)
    lon = np.arctan2(u[..., 0], u[..., 2])
    lat = np.arcsin(np.clip(u[..., 1], -1.0, 1.0))
    x = (lon + np.pi) / (2.0 * np.pi) * w - 0.5
    y = np.clip((0.5 * np.pi - lat) / np.pi * h - 0.5, 0.0, h - 1.0)
    c0 = np.floor(x).astype(int)
    r0 = np.floor(y).astype(int)
    fx = (x - c0)[..., None]
    fy = (y - r0)[..., None]
    c0w, c1w = c0 % w, (c0 + 1) % w
    r1 = np.minimum(r0 + 1, h - 1)
    top = _lerp(img[r0, c0w], img[r0, c1w], fx)
    bot = _lerp(img[r1, c0w], img[r1, c1w], fx)
    return _lerp(top, bot, fy)


def equirect_to_cubemap(img: np.ndarray, resolution: int) -> CubemapTexture:
    _, _, _, dirs = texel_centers(resolution)
    return CubemapTexture(sample_equirect(img, dirs))


@dataclass
class EquirectMap:
    image: np.ndarray  # (H, W, C)

    def sample(self, u) -> np.ndarray:
        return sample_equirect(self.image, u)


def load_texture_file(path):
    """A cubemap directory, a 4:3 cross composite, or any other image as an equirect map."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such texture")
    if path.is_dir():
        return CubemapTexture.load(path)
    img = read_pfm(path) if path.suffix.lower() == ".pfm" else read_png(path).astype(np.float64) / 255.0
    if img.ndim == 2:
        img = img[..., None]
    h, w = img.shape[:2]
    if w % 4 == 0 and h * 4 == w * 3:
        return CubemapTexture.from_cross(img)
    return EquirectMap(img)


def _texture_values(tex) -> np.ndarray:
    return tex.faces if isinstance(tex, CubemapTexture) else tex.image


# ---------------------------------------------------------------- export/edit


def _eval_texture(fields, dirs: np.ndarray, d: np.ndarray) -> np.ndarray:
    with T.no_grad():
        u = dirs.reshape(-1, 3)
        return fields.eval_texture(u, np.broadcast_to(d, u.shape)).data.reshape(dirs.shape)


def export_texture(fields, resolution: int, view_dirs, chunk: int = 65536) -> CubemapTexture:
    """Per texel, the componentwise maximum of texture(u, d) over ``view_dirs``."""
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    view_dirs = np.atleast_2d(np.asarray(view_dirs, dtype=np.float64))
    if len(view_dirs) == 0:
        raise ValueError("need at least one view direction")
    _, _, _, dirs = texel_centers(resolution)
    flat = dirs.reshape(-1, 3)
    out = np.empty_like(flat)
    for s in range(0, len(flat), chunk):
        block = flat[s:s + chunk]
        best = None
        for d in view_dirs:
            c = _eval_texture(fields, block, d / np.linalg.norm(d))
            best = c if best is None else np.maximum(best, c)
        out[s:s + chunk] = best
    return CubemapTexture(out.reshape(dirs.shape))


def export_texture_single_view(fields, resolution: int, view_dir) -> CubemapTexture:
    return export_texture(fields, resolution, [view_dir])


class EditedTexture:
    """Multiplicative edit: c' = clip(texture(u, d) * edit(u), 0, 1)."""

    def __init__(self, edit):
        vals = _texture_values(edit) if hasattr(edit, "sample") else np.asarray(edit, dtype=np.float64)
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise ValueError("edit texture must be finite and non-negative")
        self.edit = edit

    def modulator(self, u: np.ndarray) -> np.ndarray:
        if hasattr(self.edit, "sample"):
            m = self.edit.sample(u)
            return m if m.shape[-1] == 3 else np.repeat(m[..., :1], 3, axis=-1)
        return np.broadcast_to(np.asarray(self.edit, dtype=np.float64), u.shape[:-1] + (3,))

    def shade(self, fields, u, d):
        base = fields.eval_texture(u, d)
        return T.clip(T.mul(base, self.modulator(T.as_tensor(u).data)), 0.0, 1.0)


def apply_edit(fields, edit) -> EditedTexture:
    return EditedTexture(edit)


class ReplacementTexture:
    """Shade with a fixed texture map instead of the texture network."""

    def __init__(self, tex):
        self.tex = tex

    def shade(self, fields, u, d):
        c = self.tex.sample(T.as_tensor(u).data)
        return T.as_tensor(c if c.shape[-1] == 3 else np.repeat(c[..., :1], 3, axis=-1))


class CheckerTexture:
    """Two-tone checker replacing the learned texture.

    On every face the tone is ``(floor(s n) + floor(t n)) mod 2`` (with s, t
    clamped below 1); with ``n = 1`` each face is a single tone.
    """

    def __init__(self, n_squares: int, tones=((0.9, 0.9, 0.9), (0.15, 0.15, 0.15))):
        if n_squares < 1:
            raise ValueError("n_squares must be >= 1")
        self.n = n_squares
        self.tones = np.asarray(tones, dtype=np.float64)

    def parity(self, u) -> np.ndarray:
        _, s, t = dir_to_cubemap(u)
        return self.parity_st(s, t)

    def parity_st(self, s, t) -> np.ndarray:
        top = np.nextafter(1.0, 0.0)
        si = np.floor(np.minimum(s, top) * self.n).astype(int)
        ti = np.floor(np.minimum(t, top) * self.n).astype(int)
        return (si + ti) % 2

    def colour(self, u) -> np.ndarray:
        return self.tones[self.parity(u)]

    def cubemap(self, resolution: int) -> CubemapTexture:
        _, s, t, _ = texel_centers(resolution)
        return CubemapTexture(self.tones[self.parity_st(s, t)])

    def shade(self, fields, u, d):
        return T.as_tensor(self.colour(T.as_tensor(u).data))


def checkerboard_texture(n_squares: int) -> CheckerTexture:
    return CheckerTexture(n_squares)


# ------------------------------------------------------------------- surface


def cube_grid(grid_n: int):
    """Deduplicated vertices and quads of a cube surface grid.

    Each face carries ``grid_n x grid_n`` vertices; shared edges and corners
    are merged, leaving ``6 n^2 - 12 n + 8`` vertices and ``6 (n-1)^2``
    quads. Vertices are sorted by their integer lattice coordinates, which
    makes the ordering independent of traversal. Returns (unit directions,
    quads).
    """
    if grid_n < 2:
        raise ValueError("grid_n must be >= 2")
    n = grid_n
    m = n - 1
    lattice = {}
    faces_idx = []
    for f in range(6):
        normal, sax, tax = FACE_FRAMES[f]
        ij = np.empty((n, n, 3), dtype=np.int64)
        for a in range(n):
            for b in range(n):
                # lattice coords in [0, 2m] on the cube surface
                p = m * normal + (2 * a - m) * sax + (2 * b - m) * tax + m
                ij[a, b] = np.rint(p).astype(np.int64)
        faces_idx.append(ij)
        for key in map(tuple, ij.reshape(-1, 3)):
            lattice.setdefault(key, None)
    keys = sorted(lattice)
    index = {k: i for i, k in enumerate(keys)}
    quads = []
    for ij in faces_idx:
        for a in range(m):
            for b in range(m):
                # counter-clockwise seen from outside: s then t
                quads.append([index[tuple(ij[a, b])], index[tuple(ij[a + 1, b])],
                              index[tuple(ij[a + 1, b + 1])], index[tuple(ij[a, b + 1])]])
    pts = np.asarray(keys, dtype=np.float64) / m - 1.0
    return pts / np.linalg.norm(pts, axis=-1, keepdims=True), np.asarray(quads, dtype=np.int64)


def cube_grid_vertex_count(grid_n: int) -> int:
    return 6 * grid_n * grid_n - 12 * grid_n + 8


def extract_surface(fields, grid_n: int, obj_path=None):
    """Map a cube-sphere UV grid through the inverse mapping; optionally write OBJ."""
    dirs, quads = cube_grid(grid_n)
    with T.no_grad():
        verts = fields.eval_inverse_uv(dirs).data
    if obj_path is not None:
        write_obj(obj_path, verts, quads)
    return verts, quads


def harvest_surface_samples(fields, cameras, masks=None, n_samples: int = 64, supersample: int = 2,
                            threads: int = 1) -> np.ndarray:
    """Positions of the highest-weight sample on every foreground ray.

    Each camera is rendered at ``supersample`` times its resolution; a pixel
    counts as foreground where the (nearest-upsampled) mask is set, or where
    the rendered opacity exceeds one half when no masks are given.
    """
    from .renderer import Camera, render_image

    out = []
    k = supersample
    for i, cam in enumerate(cameras):
        big = Camera(cam.fx * k, cam.fy * k, cam.cx * k, cam.cy * k, cam.width * k, cam.height * k,
                     cam.rotation, cam.translation)
        img = render_image(fields, big, n_samples, threads=threads, attribution=True)
        if masks is not None:
            fg = np.repeat(np.repeat(masks[i], k, axis=0), k, axis=1) > 0.5
        else:
            fg = img["transmittance"] < 0.5
        fg &= img["top_weight"] > 0
        out.append(img["top_position"][fg])
    return np.concatenate(out) if out else np.zeros((0, 3))


def uv_coverage_metric(fields, surface_samples, resolution: int = COVERAGE_RESOLUTION) -> float:
    """Fraction of cubemap texels hit by at least one mapped surface sample."""
    pts = np.asarray(surface_samples, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return 0.0
    with T.no_grad():
        u = fields.eval_uv(pts).data
    return coverage_of_uv(u, resolution)


def coverage_of_uv(u: np.ndarray, resolution: int = COVERAGE_RESOLUTION) -> float:
    face, s, t = dir_to_cubemap(u)
    r = resolution
    col = np.minimum((s * r).astype(int), r - 1)
    row = np.minimum(((1.0 - t) * r).astype(int), r - 1)
    flat = (face * r + row) * r + col
    return len(np.unique(flat)) / (6 * r * r)
