import math

import numpy as np
import pytest

import oracles
from sghm import tensor as T
from sghm.losses import bce_loss, laplacian_pyramid, matting_loss, seg_target, total_loss
from sghm.model import ForwardOutputs
from sghm.tensor import ShapeError, Tensor


def test_bce_half_is_ln2():
    loss = bce_loss(Tensor(np.full((1, 1, 4, 4), 0.5)), np.ones((1, 1, 4, 4)))
    assert abs(float(loss.data) - math.log(2)) < 1e-6


def test_bce_perfect_prediction_hits_clamp_floor(rng):
    m = (rng.random((2, 1, 8, 8)) > 0.5).astype(np.float32)
    loss = float(bce_loss(Tensor(m), m).data)
    assert loss == pytest.approx(-math.log1p(-1e-7), rel=1e-3)


def test_bce_shape_mismatch():
    with pytest.raises(ShapeError):
        bce_loss(Tensor(np.full((1, 1, 4, 4), 0.5)), np.ones((1, 1, 2, 2)))


def test_bce_clamped_region_has_no_gradient():
    p = Tensor(np.array([0.0, 0.3, 1.0]).reshape(1, 1, 1, 3), requires_grad=True, dtype=np.float64)
    with T.Tape() as tape:
        tape.backward(bce_loss(p, np.array([1.0, 1.0, 0.0]).reshape(1, 1, 1, 3)))
    assert p.grad[0, 0, 0, 0] == 0 and p.grad[0, 0, 0, 2] == 0 and p.grad[0, 0, 0, 1] < 0


def test_seg_target_area_threshold():
    m = np.zeros((1, 1, 8, 8), np.float32)
    m[0, 0, :2, :2] = 1
    m[0, 0, 4:6, 4] = 1  # half of a 2x2 cell -> 0.5 -> foreground
    m[0, 0, 0, 4] = 1    # a quarter -> background
    got = seg_target(m, (4, 4))[0, 0]
    expect = np.zeros((4, 4))
    expect[0, 0] = 1
    expect[2, 2] = 1
    np.testing.assert_array_equal(got, expect)


def _instance(rng, h=8, w=8, weight_p=0.6):
    a = rng.random((1, 1, h, w))
    g = rng.random((1, 1, h, w))
    fg = rng.random((1, 3, h, w))
    bg = rng.random((1, 3, h, w))
    wt = (rng.random((1, 1, h, w)) < weight_p).astype(np.float64)
    return a, g, fg, bg, wt


def test_matting_loss_matches_oracle(rng):
    for _ in range(5):
        a, g, fg, bg, wt = _instance(rng)
        got = float(matting_loss(Tensor(a, dtype=np.float64), g, fg, bg, wt).data)
        assert got == pytest.approx(oracles.matting_loss(a[0, 0], g[0, 0], fg[0], bg[0], wt[0, 0]), abs=1e-9)


def test_laplacian_pyramid_matches_oracle(rng):
    x = rng.random((1, 1, 10, 7))
    got = laplacian_pyramid(Tensor(x, dtype=np.float64))
    ref = oracles.laplacian_pyramid(x[0, 0])
    assert len(got) == 5
    for a, b in zip(got, ref):
        np.testing.assert_allclose(a.data[0, 0], b, atol=1e-12)


def test_laplacian_of_constant_is_zero():
    bands = laplacian_pyramid(Tensor(np.full((1, 1, 16, 16), 0.7), dtype=np.float64))
    for band in bands:
        assert np.abs(band.data).max() < 1e-12


def test_matting_loss_zero_cases(rng):
    a, g, fg, bg, wt = _instance(rng)
    assert float(matting_loss(Tensor(g, dtype=np.float64), g, fg, bg, wt).data) == 0.0
    assert float(matting_loss(Tensor(a, dtype=np.float64), g, fg, bg, np.zeros_like(wt)).data) == 0.0


def test_matting_loss_ignores_unweighted_pixels(rng):
    a, g, fg, bg, wt = _instance(rng)
    b = a.copy()
    b[wt == 0] = rng.random(int((wt == 0).sum()))
    la = float(matting_loss(Tensor(a, dtype=np.float64), g, fg, bg, wt).data)
    lb = float(matting_loss(Tensor(b, dtype=np.float64), g, fg, bg, wt).data)
    assert la == lb


def test_matting_loss_gradcheck(rng):
    a, g, fg, bg, wt = _instance(rng)
    p = Tensor(a, requires_grad=True)
    report = T.gradcheck(lambda: matting_loss(p, g, fg, bg, wt), {"alpha": p}, per_param=20)
    assert report.passed, str(report)


def _outputs(rng, gt, perfect=False):
    h = gt.shape[2]
    refined, unknown = {}, {}
    for s in (8, 4, 1):
        down = T.resize_bilinear(Tensor(gt, dtype=np.float64), h // s, h // s).data
        refined[s] = Tensor(down if perfect else np.clip(down + rng.normal(0, 0.1, down.shape), 0, 1),
                            requires_grad=True, dtype=np.float64)
        unknown[s] = np.ones_like(down) if s == 8 else (rng.random(down.shape) < 0.5).astype(np.float64)
    return ForwardOutputs(seg=None, mask_used=None, alpha_raw=dict(refined), alpha_refined=refined,
                          unknown=unknown, alpha_prev={})


def _sample(rng, h=32):
    return rng.random((1, 1, h, h)), rng.random((1, 3, h, h)), rng.random((1, 3, h, h))


def test_total_loss_zero_for_perfect(rng):
    gt, fg, bg = _sample(rng)
    assert float(total_loss(_outputs(rng, gt, perfect=True), gt, fg, bg).data) == 0.0


def test_total_loss_termwise_and_linear(rng):
    gt, fg, bg = _sample(rng)
    out = _outputs(rng, gt)
    total, terms = total_loss(out, gt, fg, bg, (1, 2, 3), return_terms=True)
    expect = 1 * float(terms[8].data) + 2 * float(terms[4].data) + 3 * float(terms[1].data)
    assert float(total.data) == pytest.approx(expect, abs=1e-6)
    doubled = float(total_loss(out, gt, fg, bg, (2, 4, 6)).data)
    assert doubled == pytest.approx(2 * float(total.data), rel=1e-12)
    assert float(total.data) > 0


def test_total_loss_bad_omega(rng):
    gt, fg, bg = _sample(rng)
    with pytest.raises(ValueError):
        total_loss(_outputs(rng, gt), gt, fg, bg, (1, 2))
    with pytest.raises(ValueError):
        total_loss(_outputs(rng, gt), gt, fg, bg, (1, 0, 3))


def test_bce_matches_loop_oracle(rng):
    for _ in range(5):
        p = rng.random((2, 1, 4, 5))
        p[0, 0, 0, :2] = [0.0, 1.0]
        m = (rng.random(p.shape) > 0.5).astype(np.float64)
        got = float(bce_loss(Tensor(p, dtype=np.float64), m).data)
        assert got == pytest.approx(oracles.bce(p, m), abs=1e-9)
