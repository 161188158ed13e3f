"""Report figures (matplotlib, Agg backend, metadata-free PNGs)."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "savefig.dpi": 120,
}
PHASE_COLORS = {"init": "#d9d9d9", "main": "#ffffff", "finetune": "#e5f0fa"}


def _save(fig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def loss_curves(log: dict, path, window: int = 50) -> None:
    """Per-term loss curves on a log axis, phases shaded."""
    from .training import smoothed

    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.4, 3.6))
        it = log["iteration"]
        phases = log["phase"]
        start = 0
        for i in range(1, len(phases) + 1):
            if i == len(phases) or phases[i] != phases[start]:
                hi = it[i] if i < len(phases) else it[-1]
                ax.axvspan(it[start], hi, color=PHASE_COLORS.get(phases[start], "white"), lw=0, zorder=0)
                start = i
        for key in ("total", "L_render", "L_cycle", "L_mask", "L_chamfer", "L_cycle2"):
            vals = np.asarray(log[key])
            if not np.any(vals > 0):
                continue
            # smooth only the iterations where the term was active; a NaN
            # would poison the running sum for every later point
            on = vals > 0
            ax.plot(np.asarray(it)[on], smoothed(vals[on], window), lw=1, label=key)
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend(fontsize=7, ncol=3)
        fig.tight_layout()
        _save(fig, path)


def refinement(widths, errors, slope: float, path) -> None:
    """Log-log error against bin width with the fitted power law."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.4))
        widths, errors = np.asarray(widths), np.asarray(errors)
        ax.loglog(widths, errors, "o-", ms=4, label="renderer vs oracle")
        c = np.exp(np.mean(np.log(errors) - slope * np.log(widths)))
        ax.loglog(widths, c * widths ** slope, "--", lw=1, label=f"slope {slope:.2f}")
        ax.set_xlabel("bin width")
        ax.set_ylabel("mean abs error")
        ax.legend()
        fig.tight_layout()
        _save(fig, path)


def eval_report(report, path, renders=None, targets=None) -> None:
    """Per-view PSNR/SSIM bars, optionally followed by prediction/target pairs."""
    n_img = 0 if renders is None else len(renders)
    with plt.rc_context(STYLE):
        rows = 1 + (1 if n_img else 0)
        fig = plt.figure(figsize=(max(6.0, 1.6 * n_img), 2.8 * rows))
        ax1 = fig.add_subplot(rows, 2, 1)
        ax2 = fig.add_subplot(rows, 2, 2)
        labels = [str(v) for v in report.views]
        ps = [60.0 if math.isinf(p) else p for p in report.psnr]
        ax1.bar(labels, ps, color="#4c72b0")
        ax1.set_ylabel("PSNR (dB)")
        ax2.bar(labels, report.ssim, color="#55a868")
        ax2.set_ylabel("SSIM")
        ax2.set_ylim(min(0.0, min(report.ssim, default=0.0)), 1.0)
        for i in range(n_img):
            ax = fig.add_subplot(rows, n_img, n_img + i + 1)
            ax.imshow(np.clip(np.concatenate([renders[i], targets[i]], axis=0), 0, 1), interpolation="nearest")
            ax.set_title(labels[i], fontsize=7)
            ax.axis("off")
        fig.tight_layout()
        _save(fig, path)
