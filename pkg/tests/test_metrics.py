import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from neutex.metrics import INF_SENTINEL, EvalReport, psnr, ssim, ssim_map

images = arrays(np.float64, (13, 12, 3), elements=st.floats(0, 1))

# variances are E[x^2] - E[x]^2 over 121 window terms; on near-constant
# windows the cancellation error is up to ~121 eps, divided by C2 = 9e-4
SSIM_TOL = 121 * np.finfo(np.float64).eps / 0.03**2


def loop_ssim(a, b, size=11, sigma=1.5):
    """Pixel-by-pixel SSIM written out with explicit loops."""
    ya = 0.299 * a[..., 0] + 0.587 * a[..., 1] + 0.114 * a[..., 2]
    yb = 0.299 * b[..., 0] + 0.587 * b[..., 1] + 0.114 * b[..., 2]
    half = (size - 1) / 2
    g = [math.exp(-((i - half) ** 2) / (2 * sigma * sigma)) for i in range(size)]
    total = sum(g)
    g = [v / total for v in g]
    scores = []
    for r in range(ya.shape[0] - size + 1):
        for c in range(ya.shape[1] - size + 1):
            ma = mb = saa = sbb = sab = 0.0
            for i in range(size):
                for j in range(size):
                    w = g[i] * g[j]
                    pa, pb = ya[r + i, c + j], yb[r + i, c + j]
                    ma += w * pa
                    mb += w * pb
                    saa += w * pa * pa
                    sbb += w * pb * pb
                    sab += w * pa * pb
            saa, sbb, sab = saa - ma * ma, sbb - mb * mb, sab - ma * mb
            c1, c2 = 0.01**2, 0.03**2
            scores.append((2 * ma * mb + c1) * (2 * sab + c2) / ((ma * ma + mb * mb + c1) * (saa + sbb + c2)))
    return float(np.mean(scores))


def test_psnr_examples():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-12)
    assert psnr(a, a) == math.inf


def test_psnr_mask_ignores_the_background():
    a, b = np.zeros((4, 4, 3)), np.zeros((4, 4, 3))
    b[:, :2] = 0.5
    mask = np.zeros((4, 4))
    mask[:, 2:] = 1
    assert psnr(a, b, mask) == math.inf
    mask[0, 0] = 1
    assert psnr(a, b, mask) == pytest.approx(10 * math.log10(1 / (0.25 * 3 / 27)), rel=1e-12)


@given(images, images)
def test_psnr_direct_formula(a, b):
    mse = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
    expect = math.inf if mse == 0 else -10 * math.log10(mse)
    assert psnr(a, b) == pytest.approx(expect, rel=1e-12)


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        psnr(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))
    with pytest.raises(ValueError, match="smaller than"):
        ssim(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))


@settings(max_examples=10, deadline=None)
@given(images, images)
def test_ssim_matches_loop_oracle(a, b):
    assert ssim(a, b) == pytest.approx(loop_ssim(a, b), abs=SSIM_TOL)


@pytest.mark.parametrize("ca,cb", [(0.2, 0.2), (0.1, 0.6), (0.0, 1.0)])
def test_ssim_of_constants(ca, cb):
    a, b = np.full((16, 16, 3), ca), np.full((16, 16, 3), cb)
    # flat images: only the luminance term survives
    expect = (2 * ca * cb + 1e-4) / (ca * ca + cb * cb + 1e-4)
    assert ssim(a, b) == pytest.approx(expect, abs=1e-12)


def test_ssim_identity_and_anticorrelation():
    a = np.random.default_rng(0).random((20, 20, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, 1.0 - a) < 0.0


@settings(max_examples=20, deadline=None)
@given(images, images)
def test_ssim_is_symmetric_and_bounded(a, b):
    assert ssim(a, b) == ssim(b, a)
    assert np.all(np.abs(ssim_map(a, b)) <= 1.0 + SSIM_TOL)


def test_ssim_mask_selects_window_centres():
    rng = np.random.default_rng(1)
    a, b = rng.random((20, 20, 3)), rng.random((20, 20, 3))
    full = ssim_map(a, b)
    mask = np.zeros((20, 20))
    mask[5, 5] = mask[8, 9] = 1
    assert ssim(a, b, mask) == pytest.approx(np.mean([full[0, 0], full[3, 4]]), rel=1e-14)
    assert ssim(a, b, np.zeros((20, 20))) == 1.0


def test_report_round_trip(tmp_path):
    rep = EvalReport(masked=True)
    rep.add("0000.png", math.inf, 1.0)
    rep.add("0001.png", 31.5, 0.93)
    rep.write(tmp_path)
    data = json.loads((tmp_path / "eval.json").read_text())
    assert data["views"][0]["psnr"] == INF_SENTINEL and data["mean_psnr"] == INF_SENTINEL
    back = EvalReport.from_json(data)
    assert back.psnr == [math.inf, 31.5] and back.ssim == [1.0, 0.93] and back.masked
    lines = (tmp_path / "eval.csv").read_text().splitlines()
    assert lines == ["view,psnr,ssim", "0000.png,inf,1.0", "0001.png,31.5,0.93"]
    assert math.isnan(EvalReport().mean_psnr)
