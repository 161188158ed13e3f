"""PNG, PFM and OBJ helpers."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    arr = to_uint8(img)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def read_png(path) -> np.ndarray:
    """8-bit PNG as uint8 array (H, W) or (H, W, C)."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB", "RGBA", "1", "P", "I;16", "I"):
            im = im.convert("RGB")
        if im.mode == "P":
            im = im.convert("RGB")
        return np.array(im)


def write_pfm(path, img: np.ndarray) -> None:
    """Little-endian PFM (float32), rows stored bottom to top."""
    arr = np.asarray(img, dtype=np.float32)
    color = arr.ndim == 3
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PF\n" if color else b"Pf\n")
        fh.write(f"{w} {h}\n-1.0\n".encode())
        fh.write(np.flipud(arr).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        w, h = (int(v) for v in fh.readline().split())
        scale = float(fh.readline())
        data = np.frombuffer(fh.read(), dtype="<f4" if scale < 0 else ">f4")
    channels = 3 if kind == b"PF" else 1
    arr = data.reshape(h, w, channels) if channels == 3 else data.reshape(h, w)
    return np.flipud(arr).astype(np.float64)


def write_obj(path, vertices: np.ndarray, faces: np.ndarray) -> None:
    """Vertices (V, 3) and polygon faces (F, k) with 0-based indices."""
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in np.asarray(vertices)]
    lines += ["f " + " ".join(str(int(i) + 1) for i in face) for face in np.asarray(faces)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path):
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(v) for v in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:]])
    return np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64)
