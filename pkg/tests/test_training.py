import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neutex.autodiff.checkpoint import load_checkpoint
from neutex.config import preset
from neutex.fields import FieldSet
from neutex.renderer import render_image
from neutex.scenes import SyntheticScene, generate_synthetic
from neutex.texture import CheckerTexture
from neutex.training import (
    LOG_COLUMNS,
    EmptyForegroundWarning,
    NumericalError,
    TrainState,
    Trainer,
    phase_at,
    read_loss_log,
    sample_batch,
    smoothed,
    trainable_networks,
)


def mask_dataset(*masks):
    images = [np.random.default_rng(i).random(m.shape + (3,)) for i, m in enumerate(masks)]
    return MaskSet(images, list(masks))


class MaskSet:
    def __init__(self, images, masks):
        self.images, self.masks = images, masks

    def __len__(self):
        return len(self.masks)


def half_mask(n=40):
    m = np.zeros((n, n))
    m[:, : n // 2] = 1.0
    return m


@pytest.fixture(scope="module")
def toy():
    ds, _ = generate_synthetic(SyntheticScene(), 3, 12, np.random.default_rng(0), n_quad=256, n_surface=200,
                               n_mvs=600)
    return ds


def smoke_trainer(toy, out, **schedule):
    cfg = preset("smoke")
    for k, v in schedule.items():
        setattr(cfg.schedule, k, v)
    return Trainer(cfg, toy, FieldSet.from_config(cfg.model, 0), out, seed=3)


# -- batch sampling ------------------------------------------------------------


def test_batch_split_matches_stated_fraction():
    ds = mask_dataset(half_mask())
    b = sample_batch(ds, np.random.default_rng(0), 600, 2 / 3)
    assert len(b) == 600
    assert int(b.mask.sum()) == 400 and int((b.mask == 0).sum()) == 200
    assert np.array_equal(b.rgb, ds.images[0][b.py, b.px])


def test_full_foreground_fraction_on_full_mask():
    ds = mask_dataset(np.ones((10, 10)))
    assert np.all(sample_batch(ds, np.random.default_rng(1), 50, 1.0).mask == 1)


def test_fractions_over_many_batches():
    ds = mask_dataset(half_mask(), half_mask(30))
    rng = np.random.default_rng(2)
    counts = [int(sample_batch(ds, rng, 128, 2 / 3).mask.sum()) for _ in range(1000)]
    assert max(abs(c - 128 * 2 / 3) for c in counts) <= 1


@settings(max_examples=40)
@given(st.integers(1, 300), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_foreground_count_is_rounded_target(b, f, seed):
    batch = sample_batch(mask_dataset(half_mask()), np.random.default_rng(seed), b, f)
    assert int(batch.mask.sum()) == int(np.floor(f * b + 0.5))


def test_one_image_per_batch_from_the_pool():
    ds = mask_dataset(half_mask(), half_mask(), half_mask())
    rng = np.random.default_rng(4)
    seen = {sample_batch(ds, rng, 8, 0.5, images=[0, 2]).image for _ in range(50)}
    assert seen == {0, 2}


def test_empty_foreground_warns_and_falls_back():
    ds = mask_dataset(np.zeros((8, 8)))
    with pytest.warns(EmptyForegroundWarning, match="empty foreground"):
        b = sample_batch(ds, np.random.default_rng(5), 20, 2 / 3)
    assert np.all(b.mask == 0) and len(b) == 20


def test_invalid_batch_arguments():
    ds = mask_dataset(half_mask())
    with pytest.raises(ValueError):
        sample_batch(ds, np.random.default_rng(0), 0, 0.5)
    with pytest.raises(ValueError):
        sample_batch(ds, np.random.default_rng(0), 10, 1.5)


# -- schedule ------------------------------------------------------------------


def test_phases_and_trainable_networks():
    cfg = preset("smoke")
    st_ = TrainState()
    assert [phase_at(i, cfg, st_) for i in (0, 5, 6, 15, 16, 21)] == \
           ["init", "init", "main", "main", "finetune", "finetune"]
    assert phase_at(10, cfg, TrainState(finetune_start=10)) == "finetune"
    assert trainable_networks("finetune", cfg, True) == ("texture",)
    assert trainable_networks("init", cfg, True) == ("density", "uv", "uv_inv", "texture")
    cfg.loss.cycle = 0.0
    assert trainable_networks("main", cfg, True) == ("density", "uv", "texture")
    assert trainable_networks("init", cfg, False) == ("density", "uv", "texture")


def test_smoothed_is_trailing_mean():
    assert smoothed([1.0, 3.0, 5.0, 7.0], 2).tolist() == [1.0, 2.0, 4.0, 6.0]
    assert smoothed([], 5).size == 0


def test_plateau_detection(toy, tmp_path):
    tr = smoke_trainer(toy, tmp_path)
    s = tr.cfg.schedule
    tr.state.history_total = [1.0] * (s.init_iters + s.plateau_lookback + s.plateau_window)
    assert tr.plateaued()
    tr.state.history_total = list(np.linspace(2.0, 1.0, len(tr.state.history_total)))
    assert not tr.plateaued()


# -- training runs -------------------------------------------------------------


@pytest.fixture(scope="module")
def finished(toy, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    tr = smoke_trainer(toy, out, plateau_tol=0.0)
    tr.run()
    return tr, out


def test_log_and_checkpoints(finished):
    tr, out = finished
    lines = (out / "loss_log.csv").read_text().splitlines()
    assert lines[0].split(",") == list(LOG_COLUMNS)
    log = read_loss_log(out / "loss_log.csv")
    assert log["iteration"].tolist() == list(range(22))
    assert log["phase"][:6] == ["init"] * 6 and log["phase"][-1] == "finetune"
    assert np.all(log["L_chamfer"][:6] > 0) and np.all(log["L_chamfer"][6:] == 0)
    assert np.all(log["L_cycle"][6:] > 0)
    for name in ("step_0000005", "step_0000020", "phase2_end", "final"):
        assert (out / "checkpoints" / name / "manifest.json").exists()


def test_finetune_freezes_geometry(finished, toy):
    tr, out = finished
    before, _, step_a, _ = load_checkpoint(out / "checkpoints" / "phase2_end")
    after, _, step_b, _ = load_checkpoint(out / "checkpoints" / "final")
    assert (step_a, step_b) == (16, 22)
    for name in before:
        same = before[name].tobytes() == after[name].tobytes()
        assert same == (not name.startswith("texture.")), name

    cfg = tr.cfg
    renders = []
    for arrays in (before, after):
        fs = FieldSet.from_config(cfg.model)
        fs.load_arrays(arrays)
        renders.append(render_image(fs, toy.cameras[0], 16, texture=CheckerTexture(4))["rgb"])
    assert renders[0].tobytes() == renders[1].tobytes()


def test_resume_replays_the_uninterrupted_run(finished, toy, tmp_path):
    _, ref_out = finished
    first = smoke_trainer(toy, tmp_path, plateau_tol=0.0)
    first.run(stop_at=9)
    first.save("mid")
    second = smoke_trainer(toy, tmp_path, plateau_tol=0.0)
    second.resume(tmp_path / "checkpoints" / "mid")
    second.run()
    a, sa, _, _ = load_checkpoint(ref_out / "checkpoints" / "final")
    b, sb, _, _ = load_checkpoint(tmp_path / "checkpoints" / "final")
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert all(sa.m[k].tobytes() == sb.m[k].tobytes() for k in sa.m)
    assert (tmp_path / "loss_log.csv").read_bytes() == (ref_out / "loss_log.csv").read_bytes()


def test_resume_truncates_a_longer_log(finished, toy, tmp_path):
    tr = smoke_trainer(toy, tmp_path)
    tr.run(stop_at=4)
    tr.save("early")
    tr.run(stop_at=8)
    tr.resume(tmp_path / "checkpoints" / "early")
    assert read_loss_log(tmp_path / "loss_log.csv")["iteration"].tolist() == [0, 1, 2, 3]


def test_ray_chunks_and_threads_are_invisible(toy, tmp_path):
    finals = []
    for threads in (1, 3):
        cfg = preset("smoke")
        cfg.schedule.ray_chunks = 3
        tr = Trainer(cfg, toy, FieldSet.from_config(cfg.model, 0), tmp_path / str(threads), seed=1, threads=threads)
        tr.run(stop_at=8)
        finals.append(tr.fields.state_arrays())
    assert all(finals[0][k].tobytes() == finals[1][k].tobytes() for k in finals[0])


def test_nan_loss_aborts_with_dump(toy, tmp_path):
    tr = smoke_trainer(toy, tmp_path)
    layer = tr.fields.density.mlp.layers[-1]
    layer.bias.data = np.full_like(layer.bias.data, np.nan)
    with pytest.raises(NumericalError, match="non-finite loss at iteration 0") as err:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            tr.run()
    dump = err.value.dump
    assert (dump / "batch.npz").exists() and (dump / "losses.json").exists()
    assert (dump / "checkpoint" / "manifest.json").exists()
    with np.load(dump / "batch.npz") as z:
        assert len(z["px"]) == tr.cfg.schedule.batch_rays


def test_early_stop_moves_finetune_forward(toy, tmp_path):
    tr = smoke_trainer(toy, tmp_path, main_iters=30, plateau_tol=10.0)  # any history counts as a plateau
    state = tr.run()
    s = tr.cfg.schedule
    assert state.finetune_start == s.init_iters + s.plateau_lookback + s.plateau_window
    assert state.step == state.finetune_start + s.finetune_iters
    assert (tmp_path / "checkpoints" / "phase2_end").exists()


def test_loss_curves_draw_terms_that_start_late(monkeypatch, tmp_path):
    from neutex import plotting

    captured = {}
    monkeypatch.setattr(plotting, "_save", lambda fig, path: captured.setdefault("fig", fig))
    phase = ["init"] * 5 + ["main"] * 5
    zeros, ones = [0.0] * 5, [1.0] * 5
    log = {"iteration": np.arange(10), "phase": phase, "total": np.full(10, 2.0), "L_render": np.full(10, 0.5),
           "L_cycle": np.array(zeros + ones), "L_mask": np.full(10, 0.1), "L_chamfer": np.array(ones + zeros),
           "L_cycle2": np.array(ones + zeros)}
    plotting.loss_curves(log, tmp_path / "c.png", window=3)
    lines = {ln.get_label(): ln.get_ydata() for ln in captured["fig"].axes[0].get_lines()}
    assert set(lines) == {"total", "L_render", "L_cycle", "L_mask", "L_chamfer", "L_cycle2"}
    assert all(np.all(np.isfinite(y)) and len(y) for y in lines.values())
    assert len(lines["L_cycle"]) == 5
