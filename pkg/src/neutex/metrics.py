"""PSNR and SSIM plus the evaluation report container.

SSIM is computed on luma ``Y = 0.299 R + 0.587 G + 0.114 B`` with an 11x11
Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03 and dynamic range 1, and
averaged over fully-valid window positions only.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LUMA = np.array([0.299, 0.587, 0.114])
WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03
INF_SENTINEL = "inf"


def _check_pair(a, b, what: str):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, mask=None) -> float:
    """10 log10(1 / MSE) over all channels; ``inf`` for identical inputs.

    With ``mask`` (H, W) only pixels where it is set contribute.
    """
    a, b = _check_pair(a, b, "psnr")
    sq = (a - b) ** 2
    if mask is not None:
        m = np.asarray(mask) > 0.5
        sq = sq[m]
    mse = float(np.mean(sq)) if sq.size else 0.0
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def luma(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[-1] == 1:
        return img[..., 0]
    return img[..., :3] @ LUMA


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter(img, win):
    # direct windowed sum; exact symmetry in a and b, no FFT round-off
    return np.einsum("ijkl,kl->ij", sliding_window_view(img, win.shape), win)


def ssim_map(a, b) -> np.ndarray:
    """Local SSIM at every fully-valid window position (luma)."""
    a, b = _check_pair(a, b, "ssim")
    ya, yb = luma(a), luma(b)
    if ya.shape[0] < WINDOW or ya.shape[1] < WINDOW:
        raise ValueError(f"ssim: image {ya.shape} is smaller than the {WINDOW}x{WINDOW} window")
    win = gaussian_window()
    mu_a, mu_b = _filter(ya, win), _filter(yb, win)
    saa = _filter(ya * ya, win) - mu_a ** 2
    sbb = _filter(yb * yb, win) - mu_b ** 2
    sab = _filter(ya * yb, win) - mu_a * mu_b
    c1, c2 = K1 ** 2, K2 ** 2
    return ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2))


def ssim(a, b, mask=None) -> float:
    """Mean SSIM; with ``mask`` only windows centred on masked pixels count."""
    s = ssim_map(a, b)
    if mask is not None:
        half = WINDOW // 2
        m = np.asarray(mask)[half:half + s.shape[0], half:half + s.shape[1]] > 0.5
        return float(np.mean(s[m])) if m.any() else 1.0
    return float(np.mean(s))


@dataclass
class EvalReport:
    views: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    masked: bool = False

    def add(self, view, p: float, s: float) -> None:
        self.views.append(view)
        self.psnr.append(p)
        self.ssim.append(s)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else math.nan

    def to_json(self) -> dict:
        enc = _encode
        return {"masked": self.masked, "mean_psnr": enc(self.mean_psnr), "mean_ssim": self.mean_ssim,
                "views": [{"view": v, "psnr": enc(p), "ssim": s} for v, p, s in zip(self.views, self.psnr, self.ssim)]}

    def write(self, out_dir, stem: str = "eval") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(json.dumps(self.to_json(), indent=1))
        with open(out / f"{stem}.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["view", "psnr", "ssim"])
            for v, p, s in zip(self.views, self.psnr, self.ssim):
                wr.writerow([v, _encode(p), repr(s)])

    @classmethod
    def from_json(cls, data: dict) -> "EvalReport":
        rep = cls(masked=data.get("masked", False))
        for row in data["views"]:
            rep.add(row["view"], _decode(row["psnr"]), row["ssim"])
        return rep


def _encode(v: float):
    return INF_SENTINEL if math.isinf(v) else v


def _decode(v) -> float:
    return math.inf if v == INF_SENTINEL else float(v)
