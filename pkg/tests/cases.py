"""Gradient-check cases: one small graph per differentiable op."""
import numpy as np

from sghm import nn
from sghm import tensor as T
from sghm.tensor import Tensor

TOL = 1e-3
TOL_BN_TRAIN = 1e-2


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


def case(name, seed=0):
    """Return ``(build, params, tol)`` for op ``name``."""
    rng = np.random.default_rng(seed)
    proj = np.random.default_rng(seed + 1)
    make = CASES[name]
    return make(rng, proj)


def _scalar(fn):
    def setup(rng, proj):
        x = _t(rng, 2, 3)
        return (lambda: fn(x)), {"x": x}, TOL
    return setup


def _projected(fn, params, tol=TOL):
    # a random projection keeps the check sensitive to sign and permutation errors
    def setup(rng, proj):
        tensors = params(rng)
        y0 = fn(**tensors)
        r = Tensor(proj.standard_normal(y0.shape), dtype=np.float64)
        return (lambda: T.sum_all(T.mul(fn(**tensors), r))), tensors, tol
    return setup


def _bn(training):
    def setup(rng, proj):
        x = _t(rng, 3, 2, 4, 3)
        g = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True, dtype=np.float64)
        b = _t(rng, 2)
        state = T.BatchNormState(rng.standard_normal(2), rng.uniform(0.5, 2.0, 2))
        r = Tensor(proj.standard_normal(x.shape), dtype=np.float64)

        def build():
            return T.sum_all(T.mul(T.batch_norm(x, g, b, state, training), r))
        return build, {"x": x, "gamma": g, "beta": b}, TOL_BN_TRAIN if training else TOL
    return setup


def _spectral(rng, proj):
    w = _t(rng, 4, 3, 3, 3)
    state = nn.SpectralState.fresh(w.data, rng)
    nn.spectral_norm_apply(w, state, n_iters=30)
    r = Tensor(proj.standard_normal(w.shape), dtype=np.float64)
    return (lambda: T.sum_all(T.mul(nn.spectral_norm_apply(w, state, update=False), r))), {"w": w}, TOL


def _eca(rng, proj):
    x = _t(rng, 2, 5, 3, 3)
    k = _t(rng, 3)
    r = Tensor(proj.standard_normal(x.shape), dtype=np.float64)
    return (lambda: T.sum_all(T.mul(nn.eca(x, k), r))), {"x": x, "kernel": k}, TOL


def _bce(rng, proj):
    from sghm.losses import bce_loss
    z = _t(rng, 2, 1, 4, 4)
    m = (rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64)
    return (lambda: bce_loss(T.sigmoid(z), m)), {"z": z}, TOL


CASES = {
    "conv2d": _projected(lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1),
                         lambda r: {"x": _t(r, 2, 3, 5, 5), "w": _t(r, 4, 3, 3, 3), "b": _t(r, 4)}),
    "conv2d_strided_dilated": _projected(lambda x, w: T.conv2d(x, w, stride=2, dilation=2, padding=(2, 1)),
                                         lambda r: {"x": _t(r, 1, 2, 7, 6), "w": _t(r, 3, 2, 3, 3)}),
    "conv_transpose2d": _projected(lambda x, w, b: T.conv_transpose2d(x, w, b, stride=2, padding=1),
                                   lambda r: {"x": _t(r, 2, 3, 3, 4), "w": _t(r, 3, 2, 4, 4), "b": _t(r, 2)}),
    "batch_norm_train": _bn(True),
    "batch_norm_eval": _bn(False),
    "relu": _projected(lambda x: T.relu(x), lambda r: {"x": _t(r, 2, 3, 4, 4)}),
    "sigmoid": _projected(lambda x: T.sigmoid(x), lambda r: {"x": _t(r, 2, 3, 4, 4, scale=3.0)}),
    "affine": _projected(lambda x: T.affine(x, -1.7, 0.3), lambda r: {"x": _t(r, 2, 3, 2, 2)}),
    "add_broadcast": _projected(lambda a, b: T.add(a, b), lambda r: {"a": _t(r, 2, 3, 4, 4), "b": _t(r, 1, 3, 1, 1)}),
    "sub": _projected(lambda a, b: T.sub(a, b), lambda r: {"a": _t(r, 2, 3, 4, 4), "b": _t(r, 2, 3, 4, 4)}),
    "mul_broadcast": _projected(lambda a, b: T.mul(a, b), lambda r: {"a": _t(r, 2, 3, 4, 4), "b": _t(r, 2, 3, 1, 1)}),
    "concat": _projected(lambda a, b: T.concat([a, b]), lambda r: {"a": _t(r, 2, 1, 3, 3), "b": _t(r, 2, 2, 3, 3)}),
    "reshape": _projected(lambda x: T.reshape(x, (2, 1, 12, 1)), lambda r: {"x": _t(r, 2, 3, 2, 2)}),
    "pad_constant": _projected(lambda x: T.pad2d(x, (1, 2, 0, 3)), lambda r: {"x": _t(r, 1, 2, 3, 3)}),
    "pad_reflect": _projected(lambda x: T.pad2d(x, 4, "reflect"), lambda r: {"x": _t(r, 1, 2, 3, 4)}),
    "pad_edge": _projected(lambda x: T.pad2d(x, 2, "edge"), lambda r: {"x": _t(r, 1, 2, 3, 3)}),
    "pad_symmetric": _projected(lambda x: T.pad2d(x, 3, "symmetric"), lambda r: {"x": _t(r, 1, 2, 2, 3)}),
    "crop": _projected(lambda x: T.crop(x, 1, 2, 3, 2), lambda r: {"x": _t(r, 2, 2, 5, 5)}),
    "subsample": _projected(lambda x: T.subsample(x, 2), lambda r: {"x": _t(r, 1, 2, 5, 4)}),
    "upsample_zeros": _projected(lambda x: T.upsample_zeros(x, 2), lambda r: {"x": _t(r, 1, 2, 3, 2)}),
    "resize_up": _projected(lambda x: T.resize_bilinear(x, 7, 9), lambda r: {"x": _t(r, 2, 2, 3, 4)}),
    "resize_down": _projected(lambda x: T.resize_bilinear(x, 2, 3), lambda r: {"x": _t(r, 1, 2, 8, 8)}),
    "global_avg_pool": _projected(lambda x: T.global_avg_pool(x), lambda r: {"x": _t(r, 2, 3, 4, 5)}),
    "sum_all": _scalar(T.sum_all),
    "mean_all": _scalar(T.mean_all),
    "mean_abs": _scalar(T.mean_abs),
    "spectral_norm": _spectral,
    "eca": _eca,
    "bce": _bce,
}
