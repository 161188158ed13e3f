"""ASCII PLY point clouds."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PLYError(ValueError):
    pass


def load_point_cloud(path) -> np.ndarray:
    """Read the x, y, z properties of the ``vertex`` element of an ASCII PLY."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PLYError(f"{path}:1: missing 'ply' magic")
    elements = []  # [name, count, [props]]
    fmt = None
    body = None
    for lineno, raw in enumerate(lines[1:], start=2):
        parts = raw.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        key = parts[0]
        if key == "format":
            if len(parts) != 3:
                raise PLYError(f"{path}:{lineno}: malformed format line")
            fmt = parts[1]
            if fmt != "ascii":
                raise PLYError(f"{path}:{lineno}: only ASCII PLY is supported (got {fmt})")
        elif key == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise PLYError(f"{path}:{lineno}: malformed element line {raw!r}")
            elements.append([parts[1], int(parts[2]), []])
        elif key == "property":
            if not elements:
                raise PLYError(f"{path}:{lineno}: property before any element")
            if len(parts) < 3:
                raise PLYError(f"{path}:{lineno}: malformed property line {raw!r}")
            elements[-1][2].append(parts[-1] if parts[1] != "list" else None)
        elif key == "end_header":
            body = lineno
            break
        else:
            raise PLYError(f"{path}:{lineno}: unexpected header line {raw!r}")
    if fmt is None:
        raise PLYError(f"{path}: missing format line")
    if body is None:
        raise PLYError(f"{path}: missing end_header")
    data_lines = lines[body:]
    cursor = 0
    for name, count, props in elements:
        if name != "vertex":
            cursor += count
            continue
        try:
            ix, iy, iz = (props.index(c) for c in ("x", "y", "z"))
        except ValueError:
            raise PLYError(f"{path}: vertex element lacks x/y/z properties") from None
        if count == 0:
            raise PLYError(f"{path}: point cloud is empty")
        pts = np.empty((count, 3))
        for i in range(count):
            lineno = body + cursor + i + 1
            if cursor + i >= len(data_lines):
                raise PLYError(f"{path}:{lineno}: file ends before {count} vertices were read")
            vals = data_lines[cursor + i].split()
            if len(vals) < len(props):
                raise PLYError(f"{path}:{lineno}: expected {len(props)} values, got {len(vals)}")
            try:
                pts[i] = float(vals[ix]), float(vals[iy]), float(vals[iz])
            except ValueError:
                raise PLYError(f"{path}:{lineno}: non-numeric vertex value") from None
        return pts
    raise PLYError(f"{path}: no vertex element")


def write_point_cloud(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    header = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
              "property double x", "property double y", "property double z", "end_header"]
    body = [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in pts]
    Path(path).write_text("\n".join(header + body) + "\n")
