"""Batch sampling and the three-phase optimisation loop.

Phases run back to back on one global step counter:

* ``init``: the initialisation loss when a point cloud is available,
  otherwise the main loss;
* ``main``: render + a1 cycle + a2 mask over all four networks;
* ``finetune``: the main loss with only the texture network updated.

Every step draws its randomness from ``default_rng([seed, step])``, so a
run resumed from a checkpoint replays the uninterrupted run bit for bit.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import losses as L
from .autodiff import tensor as T
from .autodiff.checkpoint import load_checkpoint, save_checkpoint
from .autodiff.optim import AdamState, adam_step
from .config import RunConfig, artifact_dict
from .fields import NETWORKS, FieldSet
from .renderer import generate_rays, render_rays

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "phase", "L_render", "L_cycle", "L_mask", "L_chamfer", "L_cycle2", "total")
PHASES = ("init", "main", "finetune")


class NumericalError(FloatingPointError):
    """Raised when a training loss turns non-finite; carries the dump path."""

    def __init__(self, message: str, dump: Path | None = None):
        super().__init__(message)
        self.dump = dump


class EmptyForegroundWarning(UserWarning):
    pass


@dataclass
class Batch:
    image: int
    px: np.ndarray
    py: np.ndarray
    mask: np.ndarray
    rgb: np.ndarray

    def __len__(self) -> int:
        return len(self.px)

    def subset(self, sl) -> "Batch":
        return Batch(self.image, self.px[sl], self.py[sl], self.mask[sl], self.rgb[sl])


def sample_batch(dataset, rng: np.random.Generator, batch_rays: int, foreground_fraction: float,
                 images=None) -> Batch:
    """Pixels from one randomly chosen image: round(f B) foreground, the rest background.

    Pixels are drawn with replacement. An image without foreground (or
    without background) fills the batch from the other pool and warns.
    """
    if batch_rays <= 0:
        raise ValueError("batch_rays must be > 0")
    if not 0.0 <= foreground_fraction <= 1.0:
        raise ValueError("foreground_fraction must lie in [0, 1]")
    pool = np.arange(len(dataset)) if images is None else np.asarray(images)
    idx = int(pool[rng.integers(len(pool))])
    mask = dataset.masks[idx]
    flat = mask.reshape(-1)
    fg = np.flatnonzero(flat > 0.5)
    bg = np.flatnonzero(flat <= 0.5)
    n_fg = int(np.floor(foreground_fraction * batch_rays + 0.5))
    if len(fg) == 0 and n_fg > 0:
        warnings.warn(f"view {idx} has an empty foreground; batch is all background", EmptyForegroundWarning)
        n_fg = 0
    if len(bg) == 0 and n_fg < batch_rays:
        warnings.warn(f"view {idx} has no background; batch is all foreground", EmptyForegroundWarning)
        n_fg = batch_rays
    pick = np.concatenate([fg[rng.integers(len(fg), size=n_fg)] if n_fg else np.zeros(0, int),
                           bg[rng.integers(len(bg), size=batch_rays - n_fg)] if batch_rays > n_fg
                           else np.zeros(0, int)])
    py, px = np.divmod(pick, mask.shape[1])
    return Batch(idx, px, py, flat[pick], dataset.images[idx][py, px])


# ----------------------------------------------------------------- the loop


@dataclass
class TrainState:
    step: int = 0
    finetune_start: int | None = None  # set when the main phase ends early
    history_total: list = field(default_factory=list)
    history_render: list = field(default_factory=list)


def phase_at(step: int, cfg: RunConfig, state: TrainState) -> str:
    s = cfg.schedule
    if step < s.init_iters:
        return "init"
    ft = state.finetune_start if state.finetune_start is not None else s.init_iters + s.main_iters
    return "main" if step < ft else "finetune"


def total_steps(cfg: RunConfig, state: TrainState) -> int:
    s = cfg.schedule
    ft = state.finetune_start if state.finetune_start is not None else s.init_iters + s.main_iters
    return ft + s.finetune_iters


def trainable_networks(phase: str, cfg: RunConfig, init_cloud: bool) -> tuple:
    """Networks receiving updates; F_uv^-1 sits out whenever no loss term reaches it."""
    if phase == "finetune":
        return ("texture",)
    if phase == "init" and init_cloud:
        return NETWORKS
    return NETWORKS if cfg.loss.cycle else ("density", "uv", "texture")


def _ray_terms(fields, cfg: RunConfig, batch: Batch, camera, rng, n_total: int, need_cycle: bool):
    """Render, cycle and mask contributions of a chunk, each scaled as sum / n_total.

    Rays that miss the scene box render black with unit transmittance; they
    still count towards the mean and contribute constants.
    """
    rays = generate_rays(camera, batch.px, batch.py)
    res = render_rays(fields, rays, cfg.render.n_samples, rng)
    hit, miss = res.index, np.flatnonzero(~rays.hit)
    scale = len(hit) / n_total
    const_render = float(np.sum(batch.rgb[miss] ** 2)) / n_total
    const_mask = float(np.sum(batch.mask[miss] ** 2)) / n_total
    if len(hit) == 0:
        zero = T.as_tensor(0.0)
        return T.as_tensor(const_render), zero, T.as_tensor(const_mask)
    render = T.add(T.mul(L.loss_render(res.rgb, batch.rgb[hit]), scale), const_render)
    trans = res.t_final if cfg.loss.mask_transmittance == "post" else res.t_last
    mask = T.add(T.mul(L.loss_mask(trans, batch.mask[hit]), scale), const_mask)
    if need_cycle:
        cycle = T.mul(L.loss_cycle_from_uv(fields, res.uv, res.positions, res.weights,
                                           cfg.loss.detach_cycle_weights), scale)
    else:
        cycle = T.as_tensor(0.0)
    return render, cycle, mask


class Trainer:
    """Owns the fields, optimiser state, logs and checkpoints of one run."""

    def __init__(self, cfg: RunConfig, dataset, fields: FieldSet, out_dir, seed: int = 0,
                 train_views=None, threads: int = 1):
        self.cfg = cfg
        self.ds = dataset
        self.fields = fields
        self.out = Path(out_dir)
        self.seed = seed
        self.views = np.arange(len(dataset)) if train_views is None else np.asarray(train_views)
        if len(self.views) == 0:
            raise ValueError("no training views")
        self.threads = threads
        self.adam = AdamState(lr=cfg.schedule.lr)
        self.state = TrainState()
        s = cfg.schedule
        self.cloud = None
        if s.use_init_pointcloud and s.init_iters > 0 and dataset.points is not None:
            self.cloud = L.voxel_downsample(dataset.points, s.init_points_min, s.init_points_max)
            self.cloud_tree = cKDTree(self.cloud)
        self.ckpt_dir = self.out / "checkpoints"
        self.log_path = self.out / "loss_log.csv"

    # -- one iteration ----------------------------------------------------

    def losses(self, step: int, phase: str) -> tuple:
        """Build the loss graph(s) of ``step``; returns (chunk totals, parts dict, batch)."""
        cfg, s, w = self.cfg, self.cfg.schedule, self.cfg.loss
        rng = np.random.default_rng([self.seed, step])
        batch = sample_batch(self.ds, rng, s.batch_rays, s.foreground_fraction, self.views)
        camera = self.ds.cameras[batch.image]
        use_init = phase == "init" and self.cloud is not None
        uv_samples = L.uniform_sphere(s.init_uv_samples, rng) if use_init else None
        bounds = np.linspace(0, len(batch), s.ray_chunks + 1).round().astype(int)
        chunk_rngs = [np.random.default_rng([self.seed, step, c]) for c in range(s.ray_chunks)]
        need_cycle = bool(w.cycle) and not use_init

        def chunk(c):
            sub = batch.subset(slice(bounds[c], bounds[c + 1]))
            return _ray_terms(self.fields, cfg, sub, camera, chunk_rngs[c], len(batch), need_cycle)

        terms = self._map(chunk, range(s.ray_chunks))
        totals, parts = [], {k: 0.0 for k in LOG_COLUMNS[2:]}
        for c, (render, cycle, mask) in enumerate(terms):
            if not use_init:
                total = L.loss_total(render, cycle, mask, w)
            elif c == 0:
                # the point-cloud terms are batch-global, so they ride on the first chunk
                chamfer = L.chamfer_distance(self.fields.eval_inverse_uv(uv_samples), self.cloud, self.cloud_tree)
                cycle2 = L.loss_cycle2(self.fields, uv_samples)
                total = L.loss_init(chamfer, cycle2, render, mask, w)
                parts["L_chamfer"] = float(chamfer.data)
                parts["L_cycle2"] = float(cycle2.data)
            else:
                total = T.add(T.mul(render, w.init_render), T.mul(mask, w.init_mask))
            parts["L_render"] += float(render.data)
            parts["L_cycle"] += float(cycle.data)
            parts["L_mask"] += float(mask.data)
            totals.append(total)
        parts["total"] = float(sum(float(t.data) for t in totals))
        return totals, parts, batch

    def _map(self, fn, items):
        items = list(items)
        if self.threads > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                return list(pool.map(fn, items))
        return [fn(i) for i in items]

    def step(self, step: int) -> dict:
        phase = phase_at(step, self.cfg, self.state)
        nets = trainable_networks(phase, self.cfg, self.cloud is not None)
        self.fields.set_trainable(nets)
        params = self.fields.parameters(nets)
        totals, parts, batch = self.losses(step, phase)
        if not np.isfinite(parts["total"]):
            dump = self._dump_nan(step, phase, parts, batch)
            raise NumericalError(f"non-finite loss at iteration {step} ({phase}); batch dumped to {dump}", dump)
        names = list(params)
        leaves = [params[n] for n in names]
        grads = self._map(lambda t: T.gradients(t, leaves), totals)
        for i, name in enumerate(names):
            g = grads[0][i]
            for extra in grads[1:]:
                g = g + extra[i]
            params[name].grad = g
        adam_step(params, self.adam)
        parts["phase"] = phase
        parts["iteration"] = step
        return parts

    def _dump_nan(self, step, phase, parts, batch) -> Path:
        path = self.out / f"nan_dump_{step:07d}"
        path.mkdir(parents=True, exist_ok=True)
        np.savez(path / "batch.npz", px=batch.px, py=batch.py, mask=batch.mask, rgb=batch.rgb,
                 image=np.array(batch.image))
        (path / "losses.json").write_text(json.dumps({"iteration": step, "phase": phase, **{
            k: repr(v) for k, v in parts.items()}}, indent=1))
        save_checkpoint(path / "checkpoint", self.fields.state_arrays(), self.adam, step, self._meta())
        return path

    # -- bookkeeping --------------------------------------------------------

    def _meta(self) -> dict:
        return {"seed": self.seed, "config": artifact_dict(self.cfg), "finetune_start": self.state.finetune_start,
                "history_total": self.state.history_total, "history_render": self.state.history_render,
                "train_views": [int(v) for v in self.views],
                "init_cloud": None if self.cloud is None else len(self.cloud)}

    def save(self, name: str) -> Path:
        return save_checkpoint(self.ckpt_dir / name, self.fields.state_arrays(), self.adam, self.state.step,
                               self._meta())

    def resume(self, path) -> None:
        params, adam, step, meta = load_checkpoint(path)
        self.fields.load_arrays(params)
        self.adam = adam
        self.state = TrainState(step, meta.get("finetune_start"), list(meta.get("history_total", [])),
                                list(meta.get("history_render", [])))
        self._truncate_log(step)

    def _truncate_log(self, step: int) -> None:
        if not self.log_path.exists():
            return
        with open(self.log_path, newline="") as fh:
            rows = list(csv.reader(fh))
        keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) < step]
        with open(self.log_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(keep)

    def _log(self, parts: dict) -> None:
        new = not self.log_path.exists()
        with open(self.log_path, "a", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            if new:
                wr.writerow(LOG_COLUMNS)
            wr.writerow([parts["iteration"], parts["phase"]] + [repr(parts[k]) for k in LOG_COLUMNS[2:]])

    def plateaued(self) -> bool:
        """Smoothed total loss improved by less than ``plateau_tol`` (relative) over the lookback."""
        s = self.cfg.schedule
        h = self.state.history_total
        main_start = s.init_iters
        n_main = len(h) - main_start
        if n_main < s.plateau_lookback + s.plateau_window:
            return False
        now = float(np.mean(h[-s.plateau_window:]))
        back = len(h) - s.plateau_lookback
        then = float(np.mean(h[back - s.plateau_window:back]))
        return then - now < s.plateau_tol * abs(then)

    # -- driver -------------------------------------------------------------

    def run(self, stop_at: int | None = None, callback=None) -> TrainState:
        """Train until the schedule ends (or ``stop_at`` global steps, for tests)."""
        self.out.mkdir(parents=True, exist_ok=True)
        s = self.cfg.schedule
        phase2_end = s.init_iters + s.main_iters
        while self.state.step < total_steps(self.cfg, self.state):
            if stop_at is not None and self.state.step >= stop_at:
                return self.state
            step = self.state.step
            phase = phase_at(step, self.cfg, self.state)
            if phase == "finetune" and step == self._finetune_start() and not (self.ckpt_dir / "phase2_end").exists():
                self.save("phase2_end")
            parts = self.step(step)
            self.state.history_total.append(parts["total"])
            self.state.history_render.append(parts["L_render"])
            self.state.step = step + 1
            if step % s.log_every == 0 or self.state.step == total_steps(self.cfg, self.state):
                self._log(parts)
            if callback is not None:
                callback(parts)
            if phase == "main" and self.state.finetune_start is None and self.state.step < phase2_end \
                    and self.plateaued():
                log.info("main phase plateaued at iteration %d", self.state.step)
                self.state.finetune_start = self.state.step
            if s.checkpoint_every and self.state.step % s.checkpoint_every == 0:
                self.save(f"step_{self.state.step:07d}")
        if self._finetune_start() >= total_steps(self.cfg, self.state) and \
                not (self.ckpt_dir / "phase2_end").exists():
            self.save("phase2_end")
        self.save("final")
        return self.state

    def _finetune_start(self) -> int:
        s = self.cfg.schedule
        return self.state.finetune_start if self.state.finetune_start is not None else s.init_iters + s.main_iters


def smoothed(values, window: int) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return v
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def read_loss_log(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {k: np.array([float(r[k]) for r in rows]) for k in LOG_COLUMNS if k != "phase"}
    out["phase"] = [r["phase"] for r in rows]
    return out
