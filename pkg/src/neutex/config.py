"""Run configuration: nested dataclasses with a strict YAML round trip.

Unknown keys are rejected at every level so a typo never silently falls
back to a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class NetConfig:
    width: int = 256
    depth: int = 4
    skips: list = field(default_factory=list)


@dataclass
class ModelConfig:
    k_position: int = 10
    k_uv: int = 10
    k_view: int = 6
    density: NetConfig = field(default_factory=lambda: NetConfig(256, 8, [4]))
    uv: NetConfig = field(default_factory=lambda: NetConfig(256, 4))
    uv_inv: NetConfig = field(default_factory=lambda: NetConfig(256, 4))
    texture: NetConfig = field(default_factory=lambda: NetConfig(256, 6))
    uv_inv_out_scale: float = 1e-3


@dataclass
class LossWeights:
    cycle: float = 1.0  # a1
    mask: float = 1.0  # a2
    init_cycle2: float = 100.0  # a
    init_render: float = 1.0  # b
    init_mask: float = 1.0  # c
    detach_cycle_weights: bool = True
    mask_transmittance: str = "post"  # "post" = T_{N+1}, "pre" = T_N


@dataclass
class TrainSchedule:
    init_iters: int = 50_000
    main_iters: int = 500_000
    finetune_iters: int = 50_000
    batch_rays: int = 600
    foreground_fraction: float = 2.0 / 3.0
    lr: float = 5e-4
    use_init_pointcloud: bool = True
    init_uv_samples: int = 2500
    init_points_min: int = 2000
    init_points_max: int = 3000
    checkpoint_every: int = 10_000
    log_every: int = 100
    ray_chunks: int = 1
    plateau_window: int = 500
    plateau_lookback: int = 10_000
    plateau_tol: float = 1e-4


@dataclass
class RenderConfig:
    n_samples: int = 256
    chunk_size: int = 4096


@dataclass
class RunConfig:
    dataset: str = ""
    out: str = "run"
    seed: int = 0
    heldout: list = field(default_factory=list)
    threads: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    render: RenderConfig = field(default_factory=RenderConfig)

    def validate(self) -> "RunConfig":
        s, w = self.schedule, self.loss
        if s.batch_rays <= 0:
            raise ConfigError("schedule.batch_rays must be > 0")
        if not 0.0 <= s.foreground_fraction <= 1.0:
            raise ConfigError("schedule.foreground_fraction must lie in [0, 1]")
        for name in ("init_iters", "main_iters", "finetune_iters"):
            if getattr(s, name) < 0:
                raise ConfigError(f"schedule.{name} must be >= 0")
        if s.ray_chunks < 1 or s.ray_chunks > s.batch_rays:
            raise ConfigError("schedule.ray_chunks must lie in [1, batch_rays]")
        for f in dataclasses.fields(LossWeights):
            val = getattr(w, f.name)
            if isinstance(val, float) and val < 0:
                raise ConfigError(f"loss.{f.name} must be >= 0")
        if w.mask_transmittance not in ("post", "pre"):
            raise ConfigError("loss.mask_transmittance must be 'post' or 'pre'")
        if self.render.n_samples < 2:
            raise ConfigError("render.n_samples must be >= 2")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        m = self.model
        for k in ("k_position", "k_uv", "k_view"):
            if getattr(m, k) < 0:
                raise ConfigError(f"model.{k} must be >= 0")
        return self


def preset(name: str) -> RunConfig:
    """``paper`` is the full-scale schedule; ``desk`` is the scaled run;
    ``smoke`` is a seconds-long configuration for tests."""
    cfg = RunConfig()
    if name == "paper":
        cfg.schedule.batch_rays = 600
        return cfg
    if name == "desk":
        cfg.model = ModelConfig(
            density=NetConfig(64, 4, [2]),
            uv=NetConfig(64, 3),
            uv_inv=NetConfig(64, 3),
            texture=NetConfig(64, 4),
        )
        cfg.schedule = TrainSchedule(
            init_iters=2_000,
            main_iters=20_000,
            finetune_iters=2_000,
            batch_rays=128,
            checkpoint_every=2_000,
            log_every=50,
        )
        cfg.render = RenderConfig(n_samples=64)
        return cfg
    if name == "smoke":
        cfg.model = ModelConfig(
            k_position=4,
            k_uv=4,
            k_view=2,
            density=NetConfig(16, 2, [1]),
            uv=NetConfig(16, 2),
            uv_inv=NetConfig(16, 2),
            texture=NetConfig(16, 2),
        )
        cfg.schedule = TrainSchedule(
            init_iters=6,
            main_iters=10,
            finetune_iters=6,
            batch_rays=24,
            init_uv_samples=200,
            init_points_min=150,
            init_points_max=400,
            checkpoint_every=5,
            log_every=1,
            plateau_window=4,
            plateau_lookback=8,
        )
        cfg.render = RenderConfig(n_samples=16, chunk_size=256)
        return cfg
    raise ConfigError(f"unknown preset {name!r} (choose paper, desk or smoke)")


def _from_dict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kwargs = {}
    defaults = cls()
    for key, value in data.items():
        current = getattr(defaults, key)
        path = f"{where}.{key}" if where else key
        if dataclasses.is_dataclass(current):
            kwargs[key] = _from_dict(type(current), value, path)
        else:
            kwargs[key] = _coerce(current, value, path)
    return dataclasses.replace(defaults, **kwargs)


def _coerce(current, value, path):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(current, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return list(value)
    return value


def merge(cfg: RunConfig, data: dict) -> RunConfig:
    """Overlay a (possibly partial) nested mapping on ``cfg``."""
    base = to_dict(cfg)
    _deep_update(base, data)
    return _from_dict(RunConfig, base, "")


def _deep_update(base: dict, data: dict, where: str = "") -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    for key, value in data.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"{where or 'config'}: unknown keys ['{key}']")
        if isinstance(base[key], dict):
            _deep_update(base[key], value, path)
        else:
            base[key] = value


def from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data, "")


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


# never affect results, so they stay out of files a run writes
RUNTIME_KEYS = ("threads",)


def artifact_dict(cfg: RunConfig) -> dict:
    """The config as recorded in run artifacts (runtime-only keys dropped)."""
    d = to_dict(cfg)
    for k in RUNTIME_KEYS:
        d.pop(k, None)
    return d


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    """Read a YAML config; keys it omits keep their values from ``base``."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return merge(base, data) if base is not None else from_dict(data)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(artifact_dict(cfg), sort_keys=False))


def set_override(cfg: RunConfig, assignment: str) -> RunConfig:
    """Apply ``dotted.key=value`` (value parsed as YAML)."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    value = yaml.safe_load(raw)
    nested = value
    for part in reversed(key.strip().split(".")):
        nested = {part: nested}
    return merge(cfg, nested)
