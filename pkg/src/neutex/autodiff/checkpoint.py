"""Checkpoint container: ``manifest.json`` plus a flat ``tensors.bin`` blob.

Layout (format version 1)::

    <dir>/manifest.json
        {"format": "neutex-checkpoint", "version": 1,
         "step": int, "meta": {...},
         "adam": {"lr", "beta1", "beta2", "eps", "step"},
         "tensors": [{"name", "shape", "offset", "count"}, ...]}
    <dir>/tensors.bin
        raw little-endian float64 values, tensors back to back in manifest
        order; ``offset`` is in bytes.

Tensor names are namespaced ``param/<name>``, ``adam_m/<name>`` and
``adam_v/<name>``.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .optim import AdamState

FORMAT = "neutex-checkpoint"
VERSION = 1
_LE_F8 = np.dtype("<f8")


def save_checkpoint(path, params: dict, adam: AdamState | None = None, step: int = 0, meta=None):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.mkdir(parents=True, exist_ok=True)
    entries = [("param/" + k, params[k]) for k in sorted(params)]
    if adam is not None:
        entries += [("adam_m/" + k, adam.m[k]) for k in sorted(adam.m)]
        entries += [("adam_v/" + k, adam.v[k]) for k in sorted(adam.v)]
    records = []
    offset = 0
    with open(tmp / "tensors.bin", "wb") as fh:
        for name, arr in entries:
            arr = np.ascontiguousarray(np.asarray(arr, dtype=_LE_F8))
            fh.write(arr.tobytes())
            records.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
            offset += arr.nbytes
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "step": int(step),
        "meta": meta or {},
        "adam": None
        if adam is None
        else {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "step": adam.step},
        "tensors": records,
    }
    with open(tmp / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    if path.exists():
        for child in path.iterdir():
            child.unlink()
        path.rmdir()
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    """Return ``(params, adam_state_or_None, step, meta)``."""
    path = Path(path)
    with open(path / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path}: not a checkpoint (format={manifest.get('format')!r})")
    if manifest.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    blob = (path / "tensors.bin").read_bytes()
    params, m, v = {}, {}, {}
    for rec in manifest["tensors"]:
        arr = np.frombuffer(blob, dtype=_LE_F8, count=rec["count"], offset=rec["offset"])
        arr = arr.astype(np.float64).reshape(rec["shape"])
        space, name = rec["name"].split("/", 1)
        {"param": params, "adam_m": m, "adam_v": v}[space][name] = arr
    adam = None
    if manifest["adam"] is not None:
        a = manifest["adam"]
        adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"], m=m, v=v)
    return params, adam, manifest["step"], manifest["meta"]
