import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from cases import CASES, case
from sghm import tensor as T
from sghm.tensor import NonFiniteError, ShapeError, Tape, TapeError, Tensor


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradcheck_op(name):
    build, params, tol = case(name)
    report = T.gradcheck(build, params, tol=tol, per_param=12)
    assert report.passed, str(report)


def test_conv2d_matches_loop_oracle(rng):
    x = rng.standard_normal((2, 3, 6, 5)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, dilation=1, padding=1).data
    np.testing.assert_allclose(got, oracles.conv2d(x, w, b, 2, 1, (1, 1)), rtol=1e-5, atol=1e-5)


def test_conv_transpose_matches_loop_oracle(rng):
    x = rng.standard_normal((1, 2, 3, 4))
    w = rng.standard_normal((2, 3, 4, 4))
    got = T.conv_transpose2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), stride=2, padding=1).data
    np.testing.assert_allclose(got, oracles.conv_transpose2d(x, w, 2, 1), atol=1e-12)
    assert got.shape == (1, 3, 6, 8)


def test_conv_transpose_doubles_size():
    x = Tensor(np.ones((1, 4, 5, 7)))
    w = Tensor(np.ones((4, 2, 4, 4)))
    assert T.conv_transpose2d(x, w, stride=2, padding=1).shape == (1, 2, 10, 14)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError, match="channels"):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv_empty_output():
    with pytest.raises(ShapeError, match="zero-size"):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_resize_matches_loop_oracle(rng):
    x = rng.standard_normal((1, 1, 5, 7))
    for oh, ow in ((10, 14), (3, 2), (5, 7), (9, 4)):
        got = T.resize_bilinear(Tensor(x, dtype=np.float64), oh, ow).data[0, 0]
        np.testing.assert_allclose(got, oracles.bilinear(x[0, 0], oh, ow), atol=1e-12)


def test_resize_constant_preserved():
    x = Tensor(np.full((1, 2, 4, 4), 0.3))
    np.testing.assert_allclose(T.resize_bilinear(x, 16, 8).data, 0.3, rtol=1e-6)


@pytest.mark.parametrize("mode", ["reflect", "edge", "symmetric"])
def test_pad_matches_numpy(rng, mode):
    x = rng.standard_normal((1, 2, 5, 4))
    got = T.pad2d(Tensor(x, dtype=np.float64), (3, 1, 2, 3), mode).data
    np.testing.assert_array_equal(got, np.pad(x, ((0, 0), (0, 0), (3, 1), (2, 3)), mode=mode))


def test_reflect_pad_wider_than_input():
    x = np.arange(3.0).reshape(1, 1, 1, 3)
    got = T.pad2d(Tensor(x, dtype=np.float64), (0, 0, 5, 5), "reflect").data[0, 0, 0]
    np.testing.assert_array_equal(got, [1, 0, 1, 2, 1, 0, 1, 2, 1, 0, 1, 2, 1])


def test_batch_norm_running_stats_unbiased(rng):
    x = rng.standard_normal((4, 3, 2, 2)) * 2 + 1
    state = T.BatchNormState.fresh(3)
    T.batch_norm(Tensor(x, dtype=np.float64), Tensor(np.ones(3)), Tensor(np.zeros(3)), state, True)
    np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-5)
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1), rtol=1e-5)


def test_batch_norm_train_normalizes(rng):
    x = Tensor(rng.standard_normal((4, 2, 3, 3)) * 5 + 2, dtype=np.float64)
    y = T.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), T.BatchNormState.fresh(2), True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-6)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-3)


def test_batch_norm_single_value_per_channel():
    with pytest.raises(ShapeError, match="more than one value"):
        T.batch_norm(Tensor(np.ones((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                     T.BatchNormState.fresh(2), True)


def test_sigmoid_extremes_finite():
    s = T.sigmoid(Tensor(np.array([-1e4, -50.0, 0.0, 50.0, 1e4]))).data
    assert np.all(np.isfinite(s)) and s[2] == 0.5 and s[0] == 0.0 and s[-1] == 1.0


def test_broadcast_rules():
    a = Tensor(np.ones((2, 3, 4, 4)))
    T.mul(a, Tensor(np.ones((2, 3, 1, 1))))
    with pytest.raises(ShapeError):
        T.add(a, Tensor(np.ones((2, 3, 4, 1))))


def test_no_recording_outside_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.sum_all(x)
    with pytest.raises(TapeError):
        T.backward(y)


def test_frozen_inputs_not_recorded():
    w = Tensor(np.ones((1, 1, 3, 3)), requires_grad=False)
    x = Tensor(np.ones((1, 1, 4, 4)), requires_grad=False)
    with Tape() as tape:
        T.conv2d(x, w)
    assert tape.nodes == []


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = T.sum_all(T.mul(x, x))
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = T.affine(x, 2.0)
        with pytest.raises(ShapeError, match="scalar"):
            tape.backward(y)


def test_tape_consumed_once():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = T.sum_all(x)
    tape.backward(y)
    with pytest.raises(TapeError, match="consumed"):
        tape.backward(y)


def test_non_finite_detected():
    with pytest.raises(NonFiniteError, match="affine"):
        T.affine(Tensor(np.array([1.0])), np.inf)


def test_gradcheck_detects_wrong_gradient():
    x = Tensor(np.array([0.3, -0.7]), requires_grad=True)

    def bad():
        y = T.mul(x, x)
        # backward claims d/dx = 1 instead of 2x
        return T.sum_all(T.apply_op("bad_square", y.data, (x,), lambda g: (g,)))

    assert not T.gradcheck(bad, {"x": x}).passed


def test_gradcheck_restores_parameters(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    before = x.data.copy()
    T.gradcheck(lambda: T.sum_all(T.mul(x, x)), {"x": x})
    assert x.data.dtype == np.float32
    np.testing.assert_array_equal(x.data, before)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(3, 7), w=st.integers(3, 7), k=st.sampled_from([1, 3]),
       stride=st.integers(1, 2), dilation=st.integers(1, 2), seed=st.integers(0, 10_000))
def test_conv2d_property_matches_oracle(h, w, k, stride, dilation, seed):
    r = np.random.default_rng(seed)
    pad = dilation * (k // 2)
    x = r.standard_normal((1, 2, h, w))
    wt = r.standard_normal((2, 2, k, k))
    got = T.conv2d(Tensor(x, dtype=np.float64), Tensor(wt, dtype=np.float64), stride=stride,
                   dilation=dilation, padding=pad).data
    np.testing.assert_allclose(got, oracles.conv2d(x, wt, None, stride, dilation, (pad, pad)), atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 9), w=st.integers(1, 9), oh=st.integers(1, 12), ow=st.integers(1, 12))
def test_resize_partition_of_unity(h, w, oh, ow):
    x = Tensor(np.ones((1, 1, h, w)), dtype=np.float64)
    np.testing.assert_allclose(T.resize_bilinear(x, oh, ow).data, 1.0, atol=1e-12)
