import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from neutex.autodiff import Tensor
from neutex.autodiff import tensor as T
from neutex.renderer import (
    Camera,
    CameraError,
    CompositeError,
    SamplingError,
    box_intersect,
    composite,
    generate_ray,
    generate_rays,
    render_image,
    render_pixel,
    sample_stratified,
    stratified_t,
)
from neutex.scenes import SyntheticScene, oracle_composite, oracle_render
from oracles import GRAD_RTOL, central_difference, rel_error

positive = st.floats(0.0, 20.0)


def random_camera(rng, w=24, h=18):
    eye = rng.normal(size=3)
    eye = 3.0 * eye / np.linalg.norm(eye)
    f = rng.uniform(15, 40)
    return Camera.look_at(eye, rng.uniform(-0.2, 0.2, 3), [0, 1, 0], f, f * rng.uniform(0.9, 1.1),
                          rng.uniform(0, w), rng.uniform(0, h), w, h)


def random_composite_inputs(rng, rays, n):
    sigma = rng.exponential(2.0, (rays, n)) * (rng.random((rays, n)) < 0.7)
    delta = rng.uniform(0.01, 0.5, (rays, n))
    color = rng.random((rays, n, 3))
    return sigma, color, delta


# -- cameras and rays ------------------------------------------------------


def test_principal_pixel_looks_down_minus_z():
    cam = Camera.look_at([0, 0, 3], [0, 0, 0], [0, 1, 0], 10.0, 10.0, 4.5, 4.5, 9, 9)
    ray = generate_ray(cam, (4, 4))
    assert np.allclose(ray.direction, [0, 0, -1], atol=1e-15)
    assert (ray.t_near, ray.t_far, ray.hit) == pytest.approx((2.0, 4.0, True))


def test_slab_intersection():
    t0, t1, hit = box_intersect(np.array([[-2.0, 0, 0]]), np.array([[1.0, 0, 0]]))
    assert (t0[0], t1[0], hit[0]) == (1.0, 3.0, True)


def test_miss_is_flagged():
    _, _, hit = box_intersect(np.array([[-2.0, 3.0, 0]]), np.array([[1.0, 0, 0]]))
    assert not hit[0]
    with pytest.raises(SamplingError, match="misses"):
        sample_stratified(generate_ray(Camera.look_at([0, 5, 0], [0, 10, 0], [0, 0, 1], 5, 5, 2, 2, 4, 4), (1, 1)), 8)


def test_unproject_reproject_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(20):
        cam = random_camera(rng)
        px, py = rng.integers(0, cam.width, 30), rng.integers(0, cam.height, 30)
        rays = generate_rays(cam, px, py)
        back = cam.project(rays.origins + 1.7 * rays.directions)
        assert np.max(np.abs(back - np.stack([px + 0.5, py + 0.5], -1))) < 1e-9
        assert np.allclose(np.linalg.norm(rays.directions, axis=-1), 1.0, rtol=0, atol=1e-15)


def test_camera_invariants():
    rot = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(CameraError, match="determinant"):
        Camera(10, 10, 2, 2, 4, 4, rot, np.zeros(3))
    with pytest.raises(CameraError, match="focal"):
        Camera(0, 10, 2, 2, 4, 4, np.eye(3), np.zeros(3))
    with pytest.raises(CameraError, match="principal"):
        Camera(10, 10, 4, 2, 4, 4, np.eye(3), np.zeros(3))
    cam = random_camera(np.random.default_rng(1))
    with pytest.raises(CameraError, match="bounds"):
        generate_rays(cam, [cam.width], [0])


def test_camera_json_round_trip():
    cam = random_camera(np.random.default_rng(2))
    back = Camera.from_json(cam.to_json())
    assert np.array_equal(back.rotation, cam.rotation) and np.array_equal(back.translation, cam.translation)
    assert (back.fx, back.fy, back.cx, back.cy, back.width, back.height) == \
           (cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)


# -- stratified sampling -----------------------------------------------------


def test_midpoints_without_jitter():
    t, delta = stratified_t(1.0, 3.0, 4)
    assert t.tolist() == [[1.25, 1.75, 2.25, 2.75]]
    assert delta.tolist() == [[0.5, 0.5, 0.5, 0.25]]


def test_fewer_than_two_samples_rejected():
    with pytest.raises(SamplingError):
        stratified_t(0.0, 1.0, 1)


@given(st.integers(0, 2**32 - 1), st.integers(2, 40), st.floats(0.0, 2.0), st.floats(0.01, 3.0))
def test_samples_increase_and_fill_the_interval(seed, n, t0, span):
    u = np.random.default_rng(seed).random((1, n))
    t, delta = stratified_t(t0, t0 + span, n, u)
    assert np.all(np.diff(t[0]) > 0)
    assert np.all(delta > 0)
    assert delta.sum() <= span + 1e-12
    edges = t0 + span * np.arange(n + 1) / n
    assert np.all((t[0] >= edges[:-1] - 1e-12) & (t[0] <= edges[1:] + 1e-12))


def test_bin_occupancy_is_uniform():
    n, draws, sub = 4, 100_000, 10
    rng = np.random.default_rng(3)
    t, _ = stratified_t(np.zeros(draws), np.full(draws, 2.0), n, rng.random((draws, n)))
    width = 2.0 / n
    for i in range(n):
        frac = (t[:, i] - i * width) / width
        assert np.all((frac >= 0) & (frac < 1))
        counts = np.bincount(np.minimum((frac * sub).astype(int), sub - 1), minlength=sub)
        assert stats.chisquare(counts).pvalue > 0.01


# -- compositing -------------------------------------------------------------


def test_empty_space():
    c = composite(np.zeros((1, 5)), np.random.default_rng(0).random((1, 5, 3)), np.full((1, 5), 0.1))
    assert c.rgb.data.tolist() == [[0.0, 0.0, 0.0]]
    assert np.all(c.weights.data == 0) and c.t_final.data[0] == 1.0


def test_opaque_single_sample():
    c = composite(np.array([[1e6]]), np.array([[[1.0, 0.0, 0.0]]]), np.array([[1.0]]))
    assert c.rgb.data.tolist() == [[1.0, 0.0, 0.0]]
    assert c.weights.data[0, 0] == 1.0


def test_invalid_inputs():
    with pytest.raises(CompositeError, match="density"):
        composite(np.array([[-1.0]]), np.zeros((1, 1, 3)), np.ones((1, 1)))
    with pytest.raises(CompositeError, match="segment"):
        composite(np.array([[1.0]]), np.zeros((1, 1, 3)), -np.ones((1, 1)))
    with pytest.raises(CompositeError, match="shape"):
        composite(np.ones((1, 2)), np.zeros((1, 3, 3)), np.ones((1, 2)))


def test_partition_of_unity_on_many_rays():
    sigma, color, delta = random_composite_inputs(np.random.default_rng(4), 10_000, 32)
    c = composite(sigma, color, delta)
    assert np.max(np.abs(c.weights.data.sum(-1) + c.t_final.data - 1.0)) < 1e-9
    assert np.all(c.transmittance.data[:, 0] == 1.0)
    assert np.all(np.diff(c.transmittance.data, axis=-1) <= 0)


@given(arrays(np.float64, (3, 9), elements=positive), arrays(np.float64, (3, 9), elements=st.floats(1e-3, 1.0)))
def test_composite_properties(sigma, delta):
    color = np.broadcast_to(np.array([0.2, 0.5, 0.9]), sigma.shape + (3,))
    c = composite(sigma, color, delta)
    w, trans = c.weights.data, c.transmittance.data
    assert np.all(w >= 0)
    assert np.all((trans > 0) & (trans <= 1)) and np.all(np.diff(trans, axis=-1) <= 0)
    assert np.max(np.abs(w.sum(-1) + c.t_final.data - 1.0)) < 1e-9
    # telescoping: constant colour gives colour times total opacity
    expect = np.array([0.2, 0.5, 0.9]) * (1.0 - np.exp(-np.sum(sigma * delta, -1)))[:, None]
    assert np.max(np.abs(c.rgb.data - expect)) < 1e-12


def test_telescoping_identity_on_many_rays():
    rng = np.random.default_rng(5)
    sigma, _, delta = random_composite_inputs(rng, 10_000, 32)
    col = rng.random((10_000, 1, 3))
    c = composite(sigma, np.broadcast_to(col, sigma.shape + (3,)), delta)
    expect = col[:, 0] * (1.0 - np.exp(-np.sum(sigma * delta, -1)))[:, None]
    assert np.max(np.abs(c.rgb.data - expect)) < 1e-12


def test_last_and_final_transmittance():
    c = composite(np.array([[1.0, 2.0]]), np.zeros((1, 2, 3)), np.array([[0.5, 0.25]]))
    assert c.t_last.data[0] == pytest.approx(np.exp(-0.5), rel=1e-15)
    assert c.t_final.data[0] == pytest.approx(np.exp(-1.0), rel=1e-15)


def test_composite_gradients():
    rng = np.random.default_rng(6)
    sigma, color, delta = random_composite_inputs(rng, 4, 7)
    sigma += 0.1
    proj = rng.standard_normal((4, 3))
    s, c = Tensor(sigma.copy(), True), Tensor(color.copy(), True)
    grads = T.gradients(T.sum_(T.mul(composite(s, c, delta).rgb, proj)), [s, c])

    def f():
        with T.no_grad():
            return float(np.sum(composite(sigma, color, delta).rgb.data * proj))

    numeric = central_difference(f, [sigma, color])
    assert max(rel_error(g, n) for g, n in zip(grads, numeric)) < GRAD_RTOL


def test_matches_plain_numpy_compositing_bitwise():
    sigma, color, delta = random_composite_inputs(np.random.default_rng(7), 50, 16)
    c = composite(sigma, color, delta)
    rgb, w, t_final = oracle_composite(sigma, color, delta)
    assert np.array_equal(c.rgb.data, rgb)
    assert np.array_equal(c.weights.data, w)
    assert np.array_equal(c.t_final.data, t_final)


# -- full renders ------------------------------------------------------------


@pytest.fixture(scope="module")
def shell():
    scene = SyntheticScene()
    return scene, scene.fieldset(), scene.cameras(1, 16, np.random.default_rng(0))[0]


def test_zero_density_renders_background(shell):
    scene, _, cam = shell
    fields = SyntheticScene(sigma0=0.0).fieldset()
    img = render_image(fields, cam, 16)
    assert np.all(img["rgb"] == 0) and np.all(img["transmittance"] == 1)


def test_miss_pixel_is_background(shell):
    _, fields, _ = shell
    cam = Camera.look_at([0, 5, 0], [0, 10, 0], [0, 0, 1], 5, 5, 2, 2, 4, 4)
    rgb, t_final, w, x = render_pixel(fields, cam, (1, 1), 16)
    assert rgb.tolist() == [0, 0, 0] and t_final == 1.0 and w.size == 0 and x.shape == (0, 3)


def test_image_decomposes_into_pixels(shell):
    _, fields, cam = shell
    crop = Camera(cam.fx, cam.fy, cam.cx - 7, cam.cy - 7, 2, 2, cam.rotation, cam.translation)
    img = render_image(fields, crop, 32)
    for py in range(2):
        for px in range(2):
            rgb, t_final, _, _ = render_pixel(fields, crop, (px, py), 32)
            assert np.array_equal(img["rgb"][py, px], rgb)
            assert img["transmittance"][py, px] == t_final


def test_chunk_size_and_threads_do_not_change_bits(shell):
    _, fields, cam = shell
    ref = render_image(fields, cam, 24, chunk_size=4096, seed=11)
    for chunk, threads in ((1, 1), (7, 1), (50, 4), (64, 8)):
        img = render_image(fields, cam, 24, chunk_size=chunk, seed=11, threads=threads)
        assert np.array_equal(img["rgb"], ref["rgb"])
        assert np.array_equal(img["transmittance"], ref["transmittance"])
    other = render_image(fields, cam, 24, seed=12)
    assert not np.array_equal(other["rgb"], ref["rgb"])


def test_self_convergence(shell):
    _, fields, cam = shell
    coarse = render_image(fields, cam, 256)["rgb"]
    fine = render_image(fields, cam, 1024)["rgb"]
    assert np.max(np.abs(coarse - fine)) < 5e-3


def test_small_frame_matches_oracle(shell):
    scene, fields, cam = shell
    ref, _ = oracle_render(scene, cam, n_quad=4096)
    assert np.mean(np.abs(render_image(fields, cam, 256)["rgb"] - ref)) < 5e-3


def test_golden_pixel(shell):
    # frozen from the seeded jittered render of the default shell
    _, fields, cam = shell
    img = render_image(fields, cam, 64, seed=0)
    assert img["rgb"][8, 8] == pytest.approx(GOLDEN_CENTRE, rel=1e-12)


GOLDEN_CENTRE = [0.4689436682184346, 0.7088390268142777, 0.537563670749843]


def test_attribution_picks_highest_weight_sample(shell):
    _, fields, cam = shell
    img = render_image(fields, cam, 32, attribution=True)
    hit = img["top_weight"] > 0
    assert hit.any()
    assert np.allclose(np.linalg.norm(img["top_uv"][hit], axis=-1), 1.0)
    # the strongest sample sits on the outer flank of the shell
    assert np.all(np.abs(np.linalg.norm(img["top_position"][img["top_weight"] > 0.2], axis=-1) - 0.5) < 0.15)
