import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from neutex import losses as L
from neutex.autodiff import Tensor
from neutex.autodiff import tensor as T
from neutex.autodiff.tensor import ShapeError
from neutex.config import LossWeights
from neutex.fields import FunctionNet
from neutex.scenes import SyntheticScene
from oracles import LOSS_GRAPHS, brute_chamfer, loss_gradcheck

points = arrays(np.float64, st.tuples(st.integers(1, 30), st.just(3)), elements=st.floats(-1, 1))


def sphere_fields(radius=0.5, uv=None):
    """Radial UV with the analytic inverse ``u -> radius * u``."""
    base = SyntheticScene(radius=radius).fieldset()
    if uv is not None:
        base.uv = FunctionNet(uv)
    return base


# -- render / mask / totals ----------------------------------------------------


def test_render_examples():
    assert L.loss_render([[0.2, 0.3, 0.4]], [[0.2, 0.3, 0.4]]).data == 0.0
    assert L.loss_render([[1.0, 1.0, 1.0]], [[0.0, 0.0, 0.0]]).data == 3.0


def test_render_gradient_is_twice_the_residual():
    pred, gt = np.array([[0.9, 0.1, 0.5]]), np.array([[0.4, 0.3, 0.5]])
    p = Tensor(pred, True)
    (g,) = T.gradients(L.loss_render(p, gt), [p])
    assert np.allclose(g, 2.0 * (pred - gt), rtol=0, atol=1e-15)


def test_render_averages_over_rays():
    pred = np.array([[1.0, 0, 0], [0, 0, 0]])
    assert L.loss_render(pred, np.zeros((2, 3))).data == 0.5


def test_mask_examples():
    assert L.loss_mask([1.0], [0.0]).data == 0.0
    assert L.loss_mask([1.0], [1.0]).data == 1.0
    assert L.loss_mask([0.25], [1.0]).data == 0.0625


@given(arrays(np.float64, 12, elements=st.sampled_from([0.0, 1.0])))
def test_mask_vanishes_on_correct_opacity(mask):
    assert L.loss_mask(1.0 - mask, mask).data == 0.0


def test_total_examples():
    w = LossWeights(cycle=1.0, mask=1.0)
    assert float(L.loss_total(0.5, 0.2, 0.1, w).data) == pytest.approx(0.8, abs=1e-15)
    assert float(L.loss_total(0.5, 0.2, 0.1, LossWeights(cycle=0.0, mask=0.0)).data) == 0.5
    assert float(L.loss_total(0.5, 0.2, np.nan, LossWeights(cycle=1.0, mask=0.0)).data) == 0.7


def test_init_examples():
    w = LossWeights()
    assert float(L.loss_init(0.0, 0.0, 0.0, 0.0, w).data) == 0.0
    assert float(L.loss_init(0.1, 0.01, 0.2, 0.05, w).data) == pytest.approx(1.35, abs=1e-14)
    no_a = LossWeights(init_cycle2=0.0)
    assert float(L.loss_init(0.1, 0.01, 0.2, 0.05, no_a).data) == pytest.approx(0.35, abs=1e-15)


# -- cycle ---------------------------------------------------------------------


def test_cycle_is_zero_for_exact_inverse_on_the_shell():
    rng = np.random.default_rng(0)
    x = 0.5 * L.uniform_sphere(64, rng).reshape(8, 8, 3)
    w = rng.random((8, 8))
    assert float(L.loss_cycle(sphere_fields(), x, w).data) < 1e-12


def test_cycle_hand_case():
    x = np.array([[[0.6, 0.0, 0.0], [0.0, 0.7, 0.0]]])  # residual norms^2 0.01 and 0.04
    assert float(L.loss_cycle(sphere_fields(), x, [[0.3, 0.7]]).data) == pytest.approx(0.031, abs=1e-15)


def test_cycle_with_empty_weights():
    x = np.random.default_rng(1).uniform(-1, 1, (3, 4, 3))
    assert float(L.loss_cycle(sphere_fields(), x, np.zeros((3, 4))).data) == 0.0


def test_cycle_shape_mismatch():
    with pytest.raises(ShapeError, match="loss_cycle"):
        L.loss_cycle(sphere_fields(), np.zeros((2, 4, 3)), np.zeros((2, 5)))


@given(arrays(np.float64, (2, 5, 3), elements=st.floats(-1, 1)), arrays(np.float64, (2, 5), elements=st.floats(0, 1)))
def test_cycle_is_non_negative(x, w):
    x = x + np.array([1e-3, 0, 0])  # keep away from the origin
    assert float(L.loss_cycle(sphere_fields(), x, w).data) >= 0.0


def test_cycle_weights_are_detached_by_default():
    x = np.array([[[0.6, 0.0, 0.0], [0.0, 0.7, 0.0]]])
    w = Tensor(np.array([[0.3, 0.7]]), True)
    (g,) = T.gradients(L.loss_cycle(sphere_fields(), x, w), [w])
    assert np.all(g == 0)
    (g,) = T.gradients(L.loss_cycle(sphere_fields(), x, w, detach_weights=False), [w])
    assert np.allclose(g, [[0.01, 0.04]], rtol=1e-12)


def test_cycle_from_shared_uv_matches():
    fields = sphere_fields()
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, (4, 6, 3))
    w = rng.random((4, 6))
    uv = fields.eval_uv(x.reshape(-1, 3))
    assert L.loss_cycle_from_uv(fields, uv, x, w).data == L.loss_cycle(fields, x, w).data


# -- chamfer -------------------------------------------------------------------


def test_chamfer_examples():
    a = np.random.default_rng(3).random((20, 3))
    assert float(L.chamfer_distance(a, a).data) == 0.0
    assert float(L.chamfer_distance([[0.0, 0, 0]], [[1.0, 0, 0]]).data) == 2.0


def test_chamfer_rejects_empty():
    with pytest.raises(ValueError, match="non-empty"):
        L.chamfer_distance(np.zeros((0, 3)), np.zeros((2, 3)))


@pytest.mark.parametrize("n", [1, 7, 50, 100])
def test_chamfer_matches_brute_force_exactly(n):
    rng = np.random.default_rng(n)
    a, b = rng.standard_normal((n, 3)), rng.standard_normal((max(1, n - 3), 3))
    assert float(L.chamfer_distance(a, b).data) == brute_chamfer(a, b)


@settings(max_examples=40)
@given(points, points)
def test_chamfer_symmetry_and_oracle(a, b):
    ab = float(L.chamfer_distance(a, b).data)
    assert ab == float(L.chamfer_distance(b, a).data)
    assert ab == brute_chamfer(a, b)


def test_chamfer_gradient_flows_to_both_sides():
    rng = np.random.default_rng(4)
    a, b = Tensor(rng.random((5, 3)), True), Tensor(rng.random((6, 3)), True)
    ga, gb = T.gradients(L.chamfer_distance(a, b), [a, b])
    assert np.any(ga != 0) and np.any(gb != 0)


# -- cycle2 and point clouds ---------------------------------------------------


def test_cycle2_exact_bijection():
    u = L.uniform_sphere(500, np.random.default_rng(5))
    assert float(L.loss_cycle2(sphere_fields(), u).data) < 1e-24


def test_cycle2_constant_uv():
    const = np.array([0.0, 0.6, 0.8])
    fields = sphere_fields(uv=lambda x: T.as_tensor(np.broadcast_to(const, x.shape).copy()))
    u = L.uniform_sphere(200, np.random.default_rng(6))
    expect = np.mean([np.sum((const - ui) ** 2) for ui in u])
    assert float(L.loss_cycle2(fields, u).data) == pytest.approx(expect, rel=1e-13)


def test_cycle2_evaluates_antipodes_independently():
    # a map that is not odd: shift before normalising
    def shifted(x):
        y = T.add(x, np.array([0.3, 0.0, 0.0]))
        return T.div(y, T.l2norm(y, axis=-1, keepdims=True))

    fields = sphere_fields(uv=shifted)
    u = L.uniform_sphere(1, np.random.default_rng(7))
    pair = float(L.loss_cycle2(fields, np.concatenate([u, -u])).data)
    single = [float(L.loss_cycle2(fields, v).data) for v in (u, -u)]
    assert single[0] != single[1]
    assert pair == pytest.approx(0.5 * sum(single), rel=1e-14)


def test_uniform_sphere_is_area_uniform():
    u = L.uniform_sphere(200_000, np.random.default_rng(8))
    assert np.allclose(np.linalg.norm(u, axis=-1), 1.0, atol=1e-15)
    # equal-area bands in z and equal sectors in azimuth hold equal mass
    z_counts = np.histogram(u[:, 2], bins=8, range=(-1, 1))[0]
    az_counts = np.histogram(np.arctan2(u[:, 1], u[:, 0]), bins=8, range=(-np.pi, np.pi))[0]
    for counts in (z_counts, az_counts):
        assert np.max(np.abs(counts / 25_000 - 1)) < 0.03


@pytest.mark.parametrize("n", [5000, 20000])
def test_voxel_downsample_lands_in_range(n):
    rng = np.random.default_rng(n)
    pts = 0.5 * L.uniform_sphere(n, rng) + 0.01 * rng.standard_normal((n, 3))
    out = L.voxel_downsample(pts)
    assert 2000 <= len(out) <= 3000
    assert np.all(out.min(0) >= pts.min(0)) and np.all(out.max(0) <= pts.max(0))


def test_voxel_downsample_keeps_small_clouds():
    pts = np.random.default_rng(9).random((1500, 3))
    assert np.array_equal(L.voxel_downsample(pts), pts)


# -- gradients of the loss graphs (the full sweep lives in the acceptance suite) --


@pytest.mark.parametrize("kind", LOSS_GRAPHS)
def test_loss_graph_gradients(kind):
    rng = np.random.default_rng(sum(map(ord, kind)))
    assert max(loss_gradcheck(kind, rng) for _ in range(3)) < 1e-6
