"""Dense rank-4 tensors with tape-based reverse-mode differentiation.

Operations only record onto a :class:`Tape` when one is active (``with Tape():``)
and at least one input requires a gradient.  Outside a tape every op is a plain
numpy computation, which is how inference and frozen sub-networks run.

Layout is ``(batch, channels, height, width)`` row-major; data is float32 unless
a caller explicitly stores float64 (gradcheck does, for stable differences).
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "Tensor", "Tape", "ShapeError", "NonFiniteError", "TapeError",
    "apply_op", "backward", "gradcheck", "GradcheckReport",
    "conv2d", "conv_transpose2d", "batch_norm", "BatchNormState",
    "relu", "sigmoid", "activation", "resize_bilinear", "reduce",
    "global_avg_pool", "sum_all", "mean_all", "mean_abs",
    "add", "sub", "mul", "elementwise", "affine", "concat", "reshape",
    "pad2d", "crop", "subsample", "upsample_zeros",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


_state = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A numpy array plus optional gradient buffer.

    Leaves created with ``requires_grad=True`` get a zero ``grad`` buffer of the
    same shape.  Outputs of ops carry ``requires_grad`` when recorded on a tape
    but never retain a ``grad`` of their own.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=np.float32):
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._tape: Optional[Tape] = None

    @classmethod
    def _from_op(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else affine(self, 1.0, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else affine(self, 1.0, -float(other))

    def __rsub__(self, other):
        return affine(self, -1.0, float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else affine(self, float(other), 0.0)

    __rmul__ = __mul__

    def __neg__(self):
        return affine(self, -1.0, 0.0)


@dataclass
class _Node:
    name: str
    inputs: tuple
    output: Tensor
    backward: Callable


class Tape:
    """Ordered record of differentiable operations for one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.remove(self)
        return False

    def record(self, name: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: Callable) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a tape that has already been replayed")
        output.requires_grad = True
        output._tape = self
        self.nodes.append(_Node(name, tuple(inputs), output, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward call")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    inp.grad += gi
                else:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
        self.consumed = True
        self.nodes = []


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from ``loss``."""
    if loss._tape is None:
        raise TapeError("loss was not recorded on any tape (no input required grad?)")
    loss._tape.backward(loss)


def apply_op(name: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of op ``name`` and record it if needed.

    ``backward_fn(grad_out)`` returns one gradient (or None) per input.
    """
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{name}: produced non-finite values")
    out = Tensor._from_op(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(name, inputs, out, backward_fn)
    return out


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _require_rank4(name: str, t: Tensor) -> None:
    if t.data.ndim != 4:
        raise ShapeError(f"{name}: expected a rank-4 (batch, channels, height, width) tensor, got shape {t.shape}")


# -- convolution ---------------------------------------------------------------

def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    sb, sc, sh, sw = xp.strides
    return as_strided(
        xp, (b, c, ho, wo, kh, kw),
        (sb, sc, sh * stride, sw * stride, sh * dilation, sw * dilation),
        writeable=False,
    )


def _col2im(taps: np.ndarray, hp: int, wp: int, stride: int, dilation: int) -> np.ndarray:
    # taps: (C, kh, kw, B, Ho, Wo) -> summed into (B, C, hp, wp)
    c, kh, kw, b, ho, wo = taps.shape
    out = np.zeros((c, b, hp, wp), dtype=taps.dtype)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            out[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride] += taps[:, i, j]
    return out.transpose(1, 0, 2, 3)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           dilation: int = 1, padding=0) -> Tensor:
    """2-D cross-correlation; ``padding`` is an int or ``(pad_h, pad_w)`` of zeros."""
    _require_rank4("conv2d", x)
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be (outC, inC, kH, kW), got {weight.shape}")
    if stride < 1 or dilation < 1:
        raise ShapeError(f"conv2d: stride and dilation must be >= 1 (got {stride}, {dilation})")
    b, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if c != ic:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {ic}")
    if bias is not None and bias.data.shape != (oc,):
        raise ShapeError(f"conv2d: bias must have shape ({oc},), got {bias.shape}")
    ph, pw = _pair(padding)
    ho = (h + 2 * ph - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * pw - dilation * (kw - 1) - 1) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: zero-size output for input {h}x{w}, kernel {kh}x{kw}, "
                         f"dilation {dilation}, padding {ph},{pw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    # one materialized (B*Ho*Wo, C*kh*kw) patch matrix serves forward and weight grad
    cols = _windows(xp, kh, kw, stride, dilation, ho, wo).transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, -1)
    wmat = weight.data.reshape(oc, -1)
    out = (cols @ wmat.T).reshape(b, ho, wo, oc).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, oc, 1, 1)
    out = np.ascontiguousarray(out)
    hp, wp = xp.shape[2:]

    def _backward(g):
        gx = gw = gb = None
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, oc)
        if x.requires_grad:
            taps = (wmat.T @ gmat.T).reshape(c, kh, kw, b, ho, wo)
            gxp = _col2im(taps, hp, wp, stride, dilation)
            gx = gxp[:, :, ph:ph + h, pw:pw + w]
        if weight.requires_grad:
            gw = (gmat.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return apply_op("conv2d", out, inputs, _backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Transposed convolution; weight is ``(inC, outC, kH, kW)``."""
    _require_rank4("conv_transpose2d", x)
    if weight.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d: weight must be (inC, outC, kH, kW), got {weight.shape}")
    if stride < 1:
        raise ShapeError(f"conv_transpose2d: stride must be >= 1 (got {stride})")
    b, c, h, w = x.shape
    ic, oc, kh, kw = weight.shape
    if c != ic:
        raise ShapeError(f"conv_transpose2d: input has {c} channels but weight expects {ic}")
    if bias is not None and bias.data.shape != (oc,):
        raise ShapeError(f"conv_transpose2d: bias must have shape ({oc},), got {bias.shape}")
    p = int(padding)
    hf, wf = (h - 1) * stride + kh, (w - 1) * stride + kw
    ho, wo = hf - 2 * p, wf - 2 * p
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv_transpose2d: zero-size output for input {h}x{w}, kernel {kh}x{kw}, padding {p}")
    xmat = x.data.transpose(1, 0, 2, 3).reshape(ic, -1)
    taps = (weight.data.reshape(ic, -1).T @ xmat).reshape(oc, kh, kw, b, h, w)
    full = _col2im(taps, hf, wf, stride, 1)
    out = full[:, :, p:p + ho, p:p + wo]
    if bias is not None:
        out = out + bias.data.reshape(1, oc, 1, 1)
    out = np.ascontiguousarray(out)

    def _backward(g):
        gf = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))) if p else g
        wins = _windows(np.ascontiguousarray(gf), kh, kw, stride, 1, h, w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.tensordot(wins, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if weight.requires_grad:
            gw = np.tensordot(x.data, wins, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return apply_op("conv_transpose2d", out, inputs, _backward)


# -- normalization -------------------------------------------------------------

@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool,
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    Training mode normalizes with biased batch statistics and folds the unbiased
    variance into ``state`` (``running = (1 - momentum) * running + momentum * batch``).
    """
    _require_rank4("batch_norm", x)
    b, c, h, w = x.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    if eps <= 0:
        raise ValueError("batch_norm: epsilon must be positive")
    g4 = gamma.data.reshape(1, c, 1, 1)
    if training:
        n = b * h * w
        if n < 2:
            raise ShapeError("batch_norm: training mode needs more than one value per channel")
        mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mean
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out = xhat * g4 + beta.data.reshape(1, c, 1, 1)
        state.running_mean[...] = (1 - momentum) * state.running_mean + momentum * mean.reshape(c)
        state.running_var[...] = (1 - momentum) * state.running_var + momentum * var.reshape(c) * (n / (n - 1))

        def _backward(g):
            gg = (g * xhat).sum(axis=(0, 2, 3))
            gbeta = g.sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                gx = (g4 * inv) * (g - gbeta.reshape(1, c, 1, 1) / n - xhat * gg.reshape(1, c, 1, 1) / n)
            return gx, gg, gbeta
    else:
        inv = (1.0 / np.sqrt(state.running_var + eps)).astype(x.data.dtype).reshape(1, c, 1, 1)
        xhat = (x.data - state.running_mean.reshape(1, c, 1, 1)) * inv
        out = xhat * g4 + beta.data.reshape(1, c, 1, 1)

        def _backward(g):
            gx = g * (g4 * inv) if x.requires_grad else None
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return apply_op("batch_norm", out, (x, gamma, beta), _backward)


# -- pointwise -----------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return apply_op("relu", x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)
    return apply_op("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """``scale * x + shift`` with python-scalar constants."""
    dt = x.data.dtype.type
    out = x.data * dt(scale) + dt(shift)
    return apply_op("affine", out, (x,), lambda g: (g * scale,))


def _broadcast_kind(a: Tensor, b: Tensor, name: str) -> bool:
    if a.shape == b.shape:
        return False
    ok = (a.data.ndim == 4 and b.data.ndim == 4 and b.shape[1] == a.shape[1]
          and b.shape[2:] == (1, 1) and b.shape[0] in (1, a.shape[0]))
    if not ok:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} are neither equal nor per-channel broadcastable")
    return True


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def add(a: Tensor, b: Tensor) -> Tensor:
    bc = _broadcast_kind(a, b, "add")
    return apply_op("add", a.data + b.data, (a, b),
                    lambda g: (g, _unbroadcast(g, b.shape) if bc else g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    bc = _broadcast_kind(a, b, "sub")
    return apply_op("sub", a.data - b.data, (a, b),
                    lambda g: (g, -(_unbroadcast(g, b.shape) if bc else g)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    bc = _broadcast_kind(a, b, "mul")

    def _backward(g):
        ga = g * b.data if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = g * a.data
            if bc:
                gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return apply_op("mul", a.data * b.data, (a, b), _backward)


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    ops = {"add": add, "sub": sub, "mul": mul}
    if kind not in ops:
        raise ValueError(f"unknown elementwise op {kind!r}")
    return ops[kind](a, b)


# -- structural ------------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if axis != 1:
        raise ShapeError("concat: only the channel axis (1) is supported")
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    ref = tensors[0].shape
    for t in tensors:
        _require_rank4("concat", t)
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat: non-channel dims differ: {ref} vs {t.shape}")
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=1)

    def _backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return apply_op("concat", out, tuple(tensors), _backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    return apply_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def _pad_index(n: int, before: int, after: int, mode: str) -> np.ndarray:
    idx = np.arange(-before, n + after)
    if mode == "edge":
        return np.clip(idx, 0, n - 1)
    if mode == "reflect":
        if n == 1:
            return np.zeros_like(idx)
        period = 2 * (n - 1)
        idx = np.mod(idx, period)
        return np.where(idx >= n, period - idx, idx)
    if mode == "symmetric":
        period = 2 * n
        idx = np.mod(idx, period)
        return np.where(idx >= n, period - 1 - idx, idx)
    raise ValueError(f"unknown pad mode {mode!r}")


def pad2d(x: Tensor, pad, mode: str = "constant") -> Tensor:
    """Pad height/width by ``pad`` (int or ``(top, bottom, left, right)``).

    Modes: ``constant`` (zeros), ``edge``, ``reflect`` (mirror without repeating
    the border sample) and ``symmetric`` (mirror repeating it).
    """
    _require_rank4("pad2d", x)
    if isinstance(pad, int):
        pad = (pad, pad, pad, pad)
    top, bottom, left, right = (int(p) for p in pad)
    b, c, h, w = x.shape
    if mode == "constant":
        out = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
        return apply_op("pad2d", out, (x,), lambda g: (g[:, :, top:top + h, left:left + w],))
    ih = _pad_index(h, top, bottom, mode)
    iw = _pad_index(w, left, right, mode)
    out = x.data[:, :, ih][:, :, :, iw]

    def _backward(g):
        gw = np.zeros((b, c, g.shape[2], w), dtype=g.dtype)
        np.add.at(gw, (slice(None), slice(None), slice(None), iw), g)
        gx = np.zeros((b, c, h, w), dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), ih), gw)
        return (gx,)

    return apply_op("pad2d", out, (x,), _backward)


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    _require_rank4("crop", x)
    if top < 0 or left < 0 or top + height > x.shape[2] or left + width > x.shape[3]:
        raise ShapeError(f"crop: window ({top},{left},{height},{width}) exceeds {x.shape[2:]}")
    full = x.shape

    def _backward(g):
        gx = np.zeros(full, dtype=g.dtype)
        gx[:, :, top:top + height, left:left + width] = g
        return (gx,)

    return apply_op("crop", x.data[:, :, top:top + height, left:left + width].copy(), (x,), _backward)


def subsample(x: Tensor, factor: int = 2) -> Tensor:
    """Keep every ``factor``-th row and column, starting at index 0."""
    _require_rank4("subsample", x)
    full = x.shape

    def _backward(g):
        gx = np.zeros(full, dtype=g.dtype)
        gx[:, :, ::factor, ::factor] = g
        return (gx,)

    return apply_op("subsample", x.data[:, :, ::factor, ::factor].copy(), (x,), _backward)


def upsample_zeros(x: Tensor, factor: int = 2) -> Tensor:
    """Insert zeros so input sample (i, j) lands at (factor*i, factor*j)."""
    _require_rank4("upsample_zeros", x)
    b, c, h, w = x.shape
    out = np.zeros((b, c, h * factor, w * factor), dtype=x.data.dtype)
    out[:, :, ::factor, ::factor] = x.data
    return apply_op("upsample_zeros", out, (x,), lambda g: (g[:, :, ::factor, ::factor],))


# -- resampling ------------------------------------------------------------------

def _bilinear_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=np.float64)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with half-pixel centers (``align_corners=False``), no antialiasing."""
    _require_rank4("resize_bilinear", x)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize_bilinear: output size must be >= 1, got {out_h}x{out_w}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return apply_op("resize_bilinear", x.data.copy(), (x,), lambda g: (g,))
    ry = _bilinear_matrix(h, out_h, x.data.dtype)
    rx = _bilinear_matrix(w, out_w, x.data.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)
    return apply_op("resize_bilinear", out, (x,), lambda g: (np.matmul(np.matmul(ry.T, g), rx),))


# -- reductions --------------------------------------------------------------------

def global_avg_pool(x: Tensor) -> Tensor:
    _require_rank4("global_avg_pool", x)
    h, w = x.shape[2:]
    full = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return apply_op("global_avg_pool", out, (x,), lambda g: (np.broadcast_to(g / (h * w), full).copy(),))


def sum_all(x: Tensor) -> Tensor:
    full = x.shape
    return apply_op("sum", np.asarray(x.data.sum(), dtype=x.data.dtype), (x,),
                    lambda g: (np.full(full, g, dtype=x.data.dtype),))


def mean_all(x: Tensor) -> Tensor:
    full, n = x.shape, x.data.size
    return apply_op("mean", np.asarray(x.data.mean(), dtype=x.data.dtype), (x,),
                    lambda g: (np.full(full, g / n, dtype=x.data.dtype),))


def mean_abs(x: Tensor) -> Tensor:
    n = x.data.size
    sign = np.sign(x.data)
    return apply_op("mean_abs", np.asarray(np.abs(x.data).mean(), dtype=x.data.dtype), (x,),
                    lambda g: (sign * (g / n),))


def reduce(x: Tensor, kind: str) -> Tensor:
    if kind == "global_avg_pool":
        return global_avg_pool(x)
    if kind == "sum":
        return sum_all(x)
    if kind == "mean":
        return mean_all(x)
    if kind == "mean_abs":
        return mean_abs(x)
    raise ValueError(f"unknown reduction {kind!r}")


# -- gradient checking -------------------------------------------------------------

@dataclass
class GradcheckReport:
    tol: float
    errors: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    @property
    def failed(self) -> list:
        return [name for name, e in self.errors.items() if e > self.tol]

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    def __str__(self) -> str:
        state = "pass" if self.passed else f"FAIL ({', '.join(self.failed)})"
        return f"gradcheck {state}: worst relative error {self.worst:.3g} (tol {self.tol:g})"


def gradcheck(build: Callable[[], Tensor], params: Union[Mapping[str, Tensor], Sequence[Tensor]],
              tol: float = 1e-3, eps: float = 1e-6, per_param: int = 8, subset: Optional[int] = None,
              seed: int = 0, dtype=np.float64, floor: float = 1e-6) -> GradcheckReport:
    """Compare tape gradients with central differences.

    ``build()`` must deterministically rebuild a scalar loss from the current
    parameter values.  Parameters are temporarily stored in ``dtype`` (float64 by
    default so the finite differences are not swamped by rounding).  At most
    ``per_param`` random elements are probed per tensor and, if ``subset`` is set,
    only that many randomly chosen tensors.  The relative error of one element is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not isinstance(params, Mapping):
        params = {(p.name or f"param{i}"): p for i, p in enumerate(params)}
    rng = np.random.default_rng(seed)
    names = list(params)
    if subset is not None and subset < len(names):
        names = [names[i] for i in sorted(rng.choice(len(names), size=subset, replace=False))]
    saved = {k: (p.data, p.grad) for k, p in params.items()}
    try:
        for p in params.values():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        with Tape() as tape:
            loss = build()
        if not np.isfinite(loss.data).all():
            raise NonFiniteError("gradcheck: loss is not finite")
        tape.backward(loss)
        report = GradcheckReport(tol=tol)
        for name in names:
            p = params[name]
            flat = p.data.reshape(-1)
            analytic = p.grad.reshape(-1)
            idx = np.arange(flat.size) if flat.size <= per_param else rng.choice(flat.size, per_param, replace=False)
            worst = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(build().data)
                flat[i] = orig - eps
                fm = float(build().data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError(f"gradcheck: non-finite loss while perturbing {name}")
                numeric = (fp - fm) / (2 * eps)
                a = float(analytic[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
            report.errors[name] = worst
        return report
    finally:
        for k, (data, grad) in saved.items():
            params[k].data = data
            params[k].grad = grad
