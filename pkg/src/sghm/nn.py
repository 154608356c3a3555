"""Neural building blocks on top of :mod:`sghm.tensor`.

Modules keep their learnable tensors as attributes; names are derived from the
attribute path (``encoder.stage1.0.conv1.weight``) and are therefore stable
across runs and checkpoints.  Non-learnable state (batch-norm running
statistics, spectral-norm power-iteration vectors) is exposed through
:meth:`Module.named_buffers`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

SIGMA_FLOOR = 1e-12


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def _own_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, arr in self._own_buffers().items():
            yield prefix + name, arr
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool) -> "Module":
        for _, p in self.named_parameters():
            p.requires_grad = flag
            p.grad = np.zeros_like(p.data) if flag else None
        return self

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()


def kaiming(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


# -- spectral normalization -----------------------------------------------------

@dataclass
class SpectralState:
    """Persistent power-iteration vectors for one weight matrix."""
    u: np.ndarray
    v: np.ndarray
    sigma: float = 1.0
    update: bool = True

    @classmethod
    def fresh(cls, weight: np.ndarray, rng: np.random.Generator) -> "SpectralState":
        mat = weight.reshape(weight.shape[0], -1).astype(np.float64)
        u = _unit(rng.standard_normal(mat.shape[0]))
        v = _unit(mat.T @ u)
        return cls(u.astype(np.float32), v.astype(np.float32))


def _unit(x: np.ndarray) -> np.ndarray:
    return x / max(float(np.linalg.norm(x)), SIGMA_FLOOR)


def spectral_norm_apply(weight: Tensor, state: SpectralState, n_iters: int = 1,
                        update: bool = True) -> Tensor:
    """Return ``weight / sigma`` with sigma the power-iteration estimate of the
    top singular value of ``weight`` viewed as ``(outC, rest)``.

    With ``update`` the stored ``u``/``v`` are advanced ``n_iters`` steps
    first.  The backward pass differentiates ``sigma = u^T W v`` with ``u`` and
    ``v`` held fixed.
    """
    if n_iters < 1:
        raise ValueError("spectral_norm_apply: n_iters must be >= 1")
    w = weight.data
    mat = w.reshape(w.shape[0], -1).astype(np.float64)
    if state.u.shape != (mat.shape[0],):
        raise T.ShapeError(f"spectral_norm_apply: u has shape {state.u.shape}, expected ({mat.shape[0]},)")
    u = state.u.astype(np.float64)
    v = state.v.astype(np.float64)
    if update:
        for _ in range(n_iters):
            v = _unit(mat.T @ u)
            u = _unit(mat @ v)
        state.u[...] = u
        state.v[...] = v
    sigma = max(float(u @ mat @ v), SIGMA_FLOOR)
    state.sigma = sigma
    outer = np.outer(u, v).reshape(w.shape).astype(w.dtype)
    out = (w / w.dtype.type(sigma)).astype(w.dtype)

    def _backward(g):
        return (g / sigma - (float((g * w).sum()) / sigma ** 2) * outer,)

    return T.apply_op("spectral_norm", out, (weight,), _backward)


# -- primitive layers -------------------------------------------------------------

class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: Optional[int] = None, dilation: int = 1, bias: bool = True,
                 spectral: bool = False, sn_iters: int = 1):
        self.stride, self.dilation = stride, dilation
        self.padding = dilation * (k // 2) if padding is None else padding
        self.weight = Tensor(kaiming(rng, (cout, cin, k, k), cin * k * k), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None
        self.sn = SpectralState.fresh(self.weight.data, rng) if spectral else None
        self.sn_iters = sn_iters

    def _own_buffers(self):
        if self.sn is None:
            return {}
        return {"sn_u": self.sn.u, "sn_v": self.sn.v}

    def effective_weight(self) -> Tensor:
        if self.sn is None:
            return self.weight
        return spectral_norm_apply(self.weight, self.sn, self.sn_iters,
                                   update=self.training and self.sn.update)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.effective_weight(), self.bias, self.stride, self.dilation, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 2,
                 padding: int = 0, bias: bool = True):
        self.stride, self.padding = stride, padding
        # fan-in of a stride-s transposed conv is cin * k * k / s^2 taps per output
        fan_in = max(1, cin * k * k // (stride * stride))
        self.weight = Tensor(kaiming(rng, (cin, cout, k, k), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.state = T.BatchNormState.fresh(channels)
        self.momentum, self.eps = momentum, eps

    def _own_buffers(self):
        return {"running_mean": self.state.running_mean, "running_var": self.state.running_var}

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.state, self.training, self.momentum, self.eps)


class ConvBNReLU(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 dilation: int = 1, spectral: bool = False, relu: bool = True):
        self.conv = Conv2d(cin, cout, k, rng, stride=stride, dilation=dilation, bias=False, spectral=spectral)
        self.bn = BatchNorm2d(cout)
        self.relu = relu

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return T.relu(y) if self.relu else y


# -- composite blocks -------------------------------------------------------------

class ResidualBlock(Module):
    """Basic two-conv residual block; output is ``relu(bn(conv(relu(bn(conv(x))))) + shortcut(x))``."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, stride: int = 1):
        if stride not in (1, 2):
            raise ValueError(f"ResidualBlock: stride must be 1 or 2, got {stride}")
        self.body1 = ConvBNReLU(cin, cout, 3, rng, stride=stride)
        self.body2 = ConvBNReLU(cout, cout, 3, rng, relu=False)
        self.cin, self.cout, self.stride = cin, cout, stride
        self.shortcut = ConvBNReLU(cin, cout, 1, rng, stride=stride, relu=False) \
            if (stride != 1 or cin != cout) else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cin:
            raise T.ShapeError(f"ResidualBlock: expected {self.cin} input channels, got {x.shape[1]}")
        y = self.body2(self.body1(x))
        skip = x if self.shortcut is None else self.shortcut(x)
        return T.relu(T.add(y, skip))


class ASPP(Module):
    """Atrous spatial pyramid pooling.

    Branches: 1x1 conv, one dilated 3x3 conv per rate and a global-pool 1x1
    conv broadcast back to the input size.  They are concatenated and fused by
    1x1 conv + BN + ReLU, so spatial size is preserved.
    """

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, rates: Sequence[int] = (1, 2, 4),
                 branch_channels: Optional[int] = None):
        rates = tuple(int(r) for r in rates)
        if len(set(rates)) != len(rates) or any(r < 1 for r in rates):
            raise ValueError(f"ASPP: rates must be distinct and >= 1, got {rates}")
        bc = branch_channels or cout
        self.rates = rates
        self.point = Conv2d(cin, bc, 1, rng)
        self.atrous = [Conv2d(cin, bc, 3, rng, dilation=r) for r in rates]
        self.pool = Conv2d(cin, bc, 1, rng)
        self.fuse = ConvBNReLU(bc * (len(rates) + 2), cout, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        if h < 1 or w < 1:
            raise T.ShapeError(f"ASPP: empty spatial input {x.shape}")
        branches = [self.point(x)] + [conv(x) for conv in self.atrous]
        pooled = self.pool(T.global_avg_pool(x))
        branches.append(T.resize_bilinear(pooled, h, w))
        return self.fuse(T.concat(branches))


def eca(x: Tensor, kernel: Tensor) -> Tensor:
    """Efficient channel attention: pooled channel descriptor -> zero-padded 1-D
    conv across channels -> sigmoid -> per-channel rescaling of ``x``."""
    k = kernel.shape[0]
    if kernel.data.ndim != 1 or k % 2 == 0:
        raise ValueError(f"eca: kernel must be 1-D with odd length, got shape {kernel.shape}")
    b, c = x.shape[:2]
    if k > c:
        raise ValueError(f"eca: kernel length {k} exceeds channel count {c}")
    s = T.reshape(T.global_avg_pool(x), (b, 1, c, 1))
    logits = T.conv2d(s, T.reshape(kernel, (1, 1, k, 1)), padding=(k // 2, 0))
    weights = T.sigmoid(T.reshape(logits, (b, c, 1, 1)))
    return T.mul(x, weights)


class ECA(Module):
    def __init__(self, channels: int, rng: np.random.Generator, k: int = 3):
        k = min(k, channels if channels % 2 else channels - 1)
        bound = 1.0 / np.sqrt(k)
        self.kernel = Tensor(rng.uniform(-bound, bound, size=k), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return eca(x, self.kernel)


def set_spectral_update(module: Module, flag: bool) -> None:
    """Enable/disable power-iteration updates (disabled for gradient checks)."""
    for m in module.modules():
        if isinstance(m, Conv2d) and m.sn is not None:
            m.sn.update = flag
