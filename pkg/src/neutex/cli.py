"""Command line: ``neutex <synth|train|render|extract|eval> [--config FILE] [overrides]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
abort. Relative paths are resolved against ``--out``. Every command prints
a tab-separated ``key<TAB>value`` summary on stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import plotting
from .autodiff.checkpoint import load_checkpoint
from .config import (
    ConfigError,
    RunConfig,
    artifact_dict,
    dump_config,
    load_config,
    preset,
    set_override,
    to_dict,
)
from .fields import FieldError, FieldSet
from .imageio import write_png
from .losses import chamfer_distance
from .metrics import EvalReport, psnr, ssim
from .pointcloud import PLYError, load_point_cloud
from .renderer import Camera, CameraError, render_image
from .scenes import DataError, SyntheticScene, generate_synthetic, load_dataset, write_synthetic
from .texture import (
    CheckerTexture,
    EditedTexture,
    ReplacementTexture,
    coverage_of_uv,
    cubemap_to_equirect,
    export_texture,
    extract_surface,
    harvest_surface_samples,
    load_texture_file,
)
from .training import NumericalError, Trainer, read_loss_log, total_steps

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
HELDOUT_COUNT = 4
log = logging.getLogger("neutex")


def _emit(**items) -> None:
    for k, v in items.items():
        print(f"{k}\t{v}")


def _resolve(out: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else out / p


def _clear(path: Path, markers) -> None:
    """Remove a previous output directory, but only if it looks like ours."""
    if not any((path / m).exists() for m in markers):
        raise ConfigError(f"{path}: refusing to delete a directory this tool did not create")
    shutil.rmtree(path)


def _check_fresh(path: Path, force: bool, markers) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"{path}: output directory is not empty (use --force to overwrite)")
        _clear(path, markers)


# ----------------------------------------------------------------- config


def build_config(args) -> RunConfig:
    """preset < --config file < dedicated flags < --set overrides."""
    base = preset(args.preset) if getattr(args, "preset", None) else None
    run_cfg = Path(args.out) / "config.yaml"
    if getattr(args, "config", None):
        cfg = load_config(args.config, base)
    elif base is None and args.command != "train" and run_cfg.exists():
        cfg = load_config(run_cfg)
    else:
        cfg = base or preset("desk")
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    if getattr(args, "dataset", None):
        cfg.dataset = str(_resolve(Path(args.out), args.dataset).resolve())
    if getattr(args, "no_init_pointcloud", False):
        cfg.schedule.use_init_pointcloud = False
    if getattr(args, "mask_weight", None) is not None:
        cfg.loss.mask = args.mask_weight
    if getattr(args, "cycle_weight", None) is not None:
        cfg.loss.cycle = args.cycle_weight
    if getattr(args, "heldout", None) is not None:
        cfg.heldout = _parse_ints(args.heldout)
    for item in getattr(args, "set", None) or []:
        cfg = set_override(cfg, item)
    cfg.out = str(Path(args.out).resolve())
    return cfg.validate()


def _parse_ints(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from None


def _parse_vec(text: str) -> np.ndarray:
    try:
        v = np.array([float(x) for x in text.split(",")])
    except ValueError:
        raise ConfigError(f"expected x,y,z, got {text!r}") from None
    if v.shape != (3,) or not np.linalg.norm(v) > 0:
        raise ConfigError(f"expected a non-zero x,y,z vector, got {text!r}")
    return v / np.linalg.norm(v)


def _check_heldout(cfg: RunConfig, n: int) -> None:
    bad = [i for i in cfg.heldout if not 0 <= i < n]
    if bad:
        raise ConfigError(f"held-out indices {bad} out of range for a dataset of {n} views")


def choose_heldout(n_views: int, seed: int, count: int = HELDOUT_COUNT) -> list:
    if n_views <= count:
        return []
    rng = np.random.default_rng([seed, 0x4E1D])
    return sorted(int(i) for i in rng.choice(n_views, size=count, replace=False))


# ------------------------------------------------------------- checkpoints


def _model_diff(a: dict, b: dict, prefix: str = "model") -> list:
    out = []
    for k in sorted(set(a) | set(b)):
        path = f"{prefix}.{k}"
        if isinstance(a.get(k), dict) and isinstance(b.get(k), dict):
            out += _model_diff(a[k], b[k], path)
        elif a.get(k) != b.get(k):
            out.append(f"{path} (config {a.get(k)!r}, checkpoint {b.get(k)!r})")
    return out


def load_fields(cfg: RunConfig, ckpt_path: Path) -> tuple:
    if not (ckpt_path / "manifest.json").exists():
        raise DataError(f"{ckpt_path}: no checkpoint here")
    params, _, step, meta = load_checkpoint(ckpt_path)
    saved = meta.get("config", {}).get("model")
    if saved is not None:
        diff = _model_diff(to_dict(cfg)["model"], saved)
        if diff:
            raise ConfigError("checkpoint does not match config: " + "; ".join(diff))
    fields = FieldSet.from_config(cfg.model, cfg.seed)
    fields.load_arrays(params)
    return fields, step, meta


# ----------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    out = Path(args.out)
    _check_fresh(out, args.force, ("cameras.json",))
    scene = SyntheticScene(sigma0=args.sigma0)
    rng = np.random.default_rng(args.seed)
    t0 = time.time()
    ds, truth = generate_synthetic(scene, args.views, args.resolution, rng, n_quad=args.n_quad)
    write_synthetic(out, scene, ds, truth)
    fg = float(np.mean([m.mean() for m in ds.masks]))
    _emit(command="synth", out=out, views=len(ds), resolution=f"{args.resolution}x{args.resolution}",
          points=len(ds.points), foreground_fraction=f"{fg:.4f}", seconds=f"{time.time() - t0:.1f}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = Path(args.out)
    cfg = build_config(args)
    if not cfg.dataset:
        raise ConfigError("train needs --dataset (or dataset in the config file)")
    ds = load_dataset(cfg.dataset)
    if args.heldout is None and not cfg.heldout and not args.resume:
        cfg.heldout = choose_heldout(len(ds), cfg.seed)
    _check_heldout(cfg, len(ds))
    if args.resume:
        saved = load_config(out / "config.yaml")
        if artifact_dict(saved) != {**artifact_dict(cfg), "heldout": saved.heldout}:
            raise ConfigError("resume: the effective configuration differs from the run's config.yaml")
        saved.threads = cfg.threads
        cfg = saved
    else:
        _check_fresh(out, args.force, ("config.yaml",))
        out.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out / "config.yaml")
    train_views = [i for i in range(len(ds)) if i not in set(cfg.heldout)]
    fields = FieldSet.from_config(cfg.model, cfg.seed)
    trainer = Trainer(cfg, ds, fields, out, seed=cfg.seed, train_views=train_views, threads=cfg.threads)
    if args.resume:
        ckpt = _latest_checkpoint(out) if args.resume == "latest" else _resolve(out, args.resume)
        trainer.resume(ckpt)
        log.info("resumed from %s at iteration %d", ckpt, trainer.state.step)
    t0 = time.time()
    state = trainer.run(stop_at=args.max_steps)
    if state.step < total_steps(cfg, state):
        # stopped early: leave a checkpoint that --resume and --checkpoint can use
        trainer.save(f"step_{state.step:07d}")
    lg = read_loss_log(trainer.log_path) if trainer.log_path.exists() else {"iteration": [], "total": []}
    if len(lg["iteration"]):
        plotting.loss_curves(lg, out / "loss_curves.png", window=max(1, 500 // cfg.schedule.log_every))
    _emit(command="train", out=out, iterations=state.step, heldout=",".join(map(str, cfg.heldout)),
          init_points=0 if trainer.cloud is None else len(trainer.cloud),
          final_total=f"{lg['total'][-1]:.6g}" if len(lg["total"]) else "nan",
          finetune_start=state.finetune_start if state.finetune_start is not None else "scheduled",
          seconds=f"{time.time() - t0:.1f}")
    return EXIT_OK


def _latest_checkpoint(out: Path) -> Path:
    steps = sorted((out / "checkpoints").glob("step_*"))
    if not steps:
        raise DataError(f"{out / 'checkpoints'}: nothing to resume from")
    return steps[-1]


def _run_setup(args):
    out = Path(args.out)
    cfg = build_config(args)
    fields, step, meta = load_fields(cfg, _resolve(out, args.checkpoint))
    return out, cfg, fields, meta


def _orbit(n: int, like: Camera, distance: float, elevation_deg: float = 20.0) -> list:
    el = np.radians(elevation_deg)
    cams = []
    for k in range(n):
        az = 2.0 * np.pi * k / n
        eye = distance * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        cams.append(Camera.look_at(eye, [0, 0, 0], [0, 1, 0], like.fx, like.fy, like.cx, like.cy,
                                   like.width, like.height))
    return cams


def _cameras(spec: str, cfg: RunConfig, out: Path) -> list:
    ds = load_dataset(cfg.dataset)
    if spec == "dataset":
        return list(enumerate(ds.cameras))
    if spec == "heldout":
        _check_heldout(cfg, len(ds))
        return [(i, ds.cameras[i]) for i in cfg.heldout]
    if spec.startswith("orbit:"):
        n = int(spec.split(":", 1)[1])
        dist = float(np.mean([np.linalg.norm(c.center) for c in ds.cameras]))
        return list(enumerate(_orbit(n, ds.cameras[0], dist)))
    path = _resolve(out, spec)
    try:
        views = json.loads(path.read_text())["views"]
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read cameras ({exc})") from None
    return [(i, ds.normalization.apply_camera(Camera.from_json(v))) for i, v in enumerate(views)]


def _shader(args):
    shader = None
    if args.texture_override:
        kind, _, arg = args.texture_override.partition(":")
        if kind == "checker":
            try:
                shader = CheckerTexture(int(arg or 8))
            except ValueError as exc:
                raise ConfigError(f"--texture-override: {exc}") from None
        elif kind == "cubemap":
            shader = ReplacementTexture(load_texture_file(_resolve(Path(args.out), arg)))
        else:
            raise ConfigError(f"--texture-override must be checker:N or cubemap:PATH, got {args.texture_override!r}")
    if args.edit:
        if shader is not None:
            raise ConfigError("--edit and --texture-override are mutually exclusive")
        try:
            shader = EditedTexture(load_texture_file(_resolve(Path(args.out), args.edit)))
        except FileNotFoundError as exc:
            raise DataError(str(exc)) from None
    return shader


def cmd_render(args) -> int:
    out, cfg, fields, _ = _run_setup(args)
    dest = _resolve(out, args.dest)
    dest.mkdir(parents=True, exist_ok=True)
    shader = _shader(args)
    cams = _cameras(args.cameras, cfg, out)
    n = args.samples or cfg.render.n_samples
    for k, (idx, cam) in enumerate(cams):
        img = render_image(fields, cam, n, cfg.render.chunk_size, seed=args.jitter_seed, texture=shader,
                           threads=cfg.threads, attribution=args.attribution)
        write_png(dest / f"{k:04d}.png", img["rgb"])
        if args.attribution:
            np.savez(dest / f"{k:04d}_attribution.npz", rgb=img["rgb"], transmittance=img["transmittance"],
                     top_uv=img["top_uv"], top_position=img["top_position"], top_weight=img["top_weight"])
    _emit(command="render", out=dest, frames=len(cams), samples=n, cameras=args.cameras,
          shader=args.texture_override or (f"edit:{args.edit}" if args.edit else "learned"))
    return EXIT_OK


def cmd_extract(args) -> int:
    out, cfg, fields, _ = _run_setup(args)
    dest = _resolve(out, args.dest)
    dest.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(cfg.dataset)
    train_idx = [i for i in range(len(ds)) if i not in set(cfg.heldout)]
    if args.single_view:
        views = [_parse_vec(args.single_view)]
        view_desc = "single"
    elif args.views:
        views = [_parse_vec(v) for v in args.views.split(";")]
        view_desc = "explicit"
    else:
        views = [-c.center / np.linalg.norm(c.center) for c in (ds.cameras[i] for i in train_idx)]
        view_desc = "training cameras"
    cube = export_texture(fields, args.resolution, views)
    cube.save(dest / "texture", {"view_directions": [list(map(float, v)) for v in views],
                                 "view_set": view_desc, "reduction": "componentwise max"})
    write_png(dest / "texture_equirect.png", cubemap_to_equirect(cube, 4 * args.resolution, 2 * args.resolution))
    verts, quads = extract_surface(fields, args.grid, dest / "surface.obj")
    samples = harvest_surface_samples(fields, [ds.cameras[i] for i in train_idx], [ds.masks[i] for i in train_idx],
                                      cfg.render.n_samples, threads=cfg.threads)
    from .autodiff import tensor as T

    with T.no_grad():
        uv = fields.eval_uv(samples).data if len(samples) else np.zeros((0, 3))
    report = {"coverage": coverage_of_uv(uv) if len(uv) else 0.0, "coverage_resolution": 64,
              "harvested_samples": int(len(samples)), "vertices": int(len(verts)), "quads": int(len(quads)),
              "grid_n": args.grid}
    truth = Path(cfg.dataset) / "oracle_truth" / "surface.ply"
    if truth.exists():
        gt = ds.normalization.apply(load_point_cloud(truth))
        report["surface_chamfer"] = float(chamfer_distance(verts, gt).data)
    (dest / "coverage.json").write_text(json.dumps(report, indent=1))
    _emit(command="extract", out=dest, **report)
    return EXIT_OK


def cmd_eval(args) -> int:
    out, cfg, fields, _ = _run_setup(args)
    dest = _resolve(out, args.dest)
    dest.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(cfg.dataset)
    _check_heldout(cfg, len(ds))
    if not cfg.heldout:
        raise ConfigError("no held-out views configured (use --heldout)")
    full, masked = EvalReport(), EvalReport(masked=True)
    renders, targets = [], []
    for i in cfg.heldout:
        img = render_image(fields, ds.cameras[i], cfg.render.n_samples, cfg.render.chunk_size,
                           threads=cfg.threads)["rgb"]
        gt = ds.images[i]
        write_png(dest / f"view_{i:04d}.png", img)
        full.add(i, psnr(img, gt), ssim(img, gt))
        masked.add(i, psnr(img, gt, ds.masks[i]), ssim(img, gt, ds.masks[i]))
        renders.append(img)
        targets.append(gt)
    full.write(dest, "eval")
    masked.write(dest, "eval_masked")
    plotting.eval_report(full, dest / "eval.png", renders, targets)
    _emit(command="eval", out=dest, views=",".join(map(str, cfg.heldout)),
          mean_psnr=f"{full.mean_psnr:.4f}", mean_ssim=f"{full.mean_ssim:.4f}",
          masked_psnr=f"{masked.mean_psnr:.4f}", masked_ssim=f"{masked.mean_ssim:.4f}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neutex", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, run=True):
        sp.add_argument("--out", required=True, help="output (or run) directory")
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--preset", choices=("paper", "desk", "smoke"))
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        if run:
            sp.add_argument("--dataset")
            sp.add_argument("--heldout", help="comma-separated held-out view indices")

    s = sub.add_parser("synth", help="generate the analytic shell dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--views", type=int, default=30)
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sigma0", type=float, default=50.0)
    s.add_argument("--n-quad", type=int, default=4096)
    s.add_argument("--force", action="store_true")
    s.add_argument("--config", help=argparse.SUPPRESS)

    t = sub.add_parser("train", help="run the three-phase schedule")
    common(t)
    t.add_argument("--resume", nargs="?", const="latest", help="checkpoint to resume from (default: latest)")
    t.add_argument("--no-init-pointcloud", action="store_true")
    t.add_argument("--mask-weight", type=float)
    t.add_argument("--cycle-weight", type=float)
    t.add_argument("--force", action="store_true")
    t.add_argument("--max-steps", type=int, help="stop after this many global iterations")

    for name, helptext, dest in (("render", "render views", "renders"), ("extract", "export texture and surface",
                                                                       "extract"), ("eval", "held-out metrics",
                                                                                    "eval")):
        r = sub.add_parser(name, help=helptext)
        common(r)
        r.add_argument("--checkpoint", default="checkpoints/final")
        r.add_argument("--dest", default=dest)
        if name == "render":
            r.add_argument("--cameras", default="heldout", help="dataset | heldout | orbit:N | cameras.json")
            r.add_argument("--texture-override", help="checker:N or cubemap:PATH")
            r.add_argument("--edit", help="multiplicative edit texture (cubemap dir, cross or equirect image)")
            r.add_argument("--samples", type=int)
            r.add_argument("--jitter-seed", type=int)
            r.add_argument("--attribution", action="store_true")
        if name == "extract":
            r.add_argument("--resolution", type=int, default=256)
            r.add_argument("--grid", type=int, default=65)
            r.add_argument("--single-view", help="x,y,z")
            r.add_argument("--views", help="x,y,z;x,y,z;...")
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render, "extract": cmd_extract, "eval": cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        # BLAS stays single-threaded so results never depend on --threads
        with threadpool_limits(limits=1):
            return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, PLYError, CameraError, FieldError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
