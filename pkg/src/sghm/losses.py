"""Segmentation and matting losses."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

BCE_CLAMP = 1e-7
GAUSS_1D = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
GAUSS_2D = np.outer(GAUSS_1D, GAUSS_1D)
LAP_LEVELS = 5


def _const(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(x, dtype=dtype)


def seg_target(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Area-average a full-resolution binary mask down to ``size``, re-threshold at 0.5."""
    b, c, h, w = mask.shape
    fh, fw = h // size[0], w // size[1]
    if fh * size[0] != h or fw * size[1] != w:
        raise T.ShapeError(f"seg_target: {h}x{w} is not an integer multiple of {size}")
    area = mask.reshape(b, c, size[0], fh, size[1], fw).mean(axis=(3, 5))
    return (area >= 0.5).astype(np.float32)


def bce_loss(prob: Tensor, target) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    m = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if m.shape != prob.shape:
        raise T.ShapeError(f"bce_loss: prediction {prob.shape} and target {m.shape} differ")
    raw = prob.data.astype(np.float64)
    p = np.clip(raw, BCE_CLAMP, 1 - BCE_CLAMP)
    n = p.size
    loss = -(m * np.log(p) + (1 - m) * np.log1p(-p)).mean()
    inside = (raw >= BCE_CLAMP) & (raw <= 1 - BCE_CLAMP)

    def _backward(g):
        gp = (-(m / p) + (1 - m) / (1 - p)) * inside / n
        return ((g * gp).astype(prob.data.dtype),)

    return T.apply_op("bce", np.asarray(loss, dtype=prob.data.dtype), (prob,), _backward)


def _blur(x: Tensor, kernel: Tensor) -> Tensor:
    return T.conv2d(T.pad2d(x, 2, "reflect"), kernel)


def laplacian_pyramid(x: Tensor, levels: int = LAP_LEVELS) -> list[Tensor]:
    """Band-pass levels ``cur - expand(reduce(cur))`` of a single-channel map.

    Reduce is a [1,4,6,4,1]/16 blur then keeping even samples; expand inserts
    zeros, blurs with 4x the kernel and crops back to the finer size.  Padding
    mirrors without repeating the border sample.
    """
    if x.shape[1] != 1:
        raise T.ShapeError("laplacian_pyramid expects a single-channel map")
    g = _const(GAUSS_2D.reshape(1, 1, 5, 5), x)
    g4 = _const(4.0 * GAUSS_2D.reshape(1, 1, 5, 5), x)
    pyr = []
    cur = x
    for _ in range(levels):
        h, w = cur.shape[2:]
        down = T.subsample(_blur(cur, g), 2)
        up = T.crop(_blur(T.upsample_zeros(down, 2), g4), 0, 0, h, w)
        pyr.append(T.sub(cur, up))
        cur = down
    return pyr


def matting_loss(alpha: Tensor, alpha_gt, fg, bg, weight) -> Tensor:
    """L1 + composition + Laplacian loss on ``alpha * weight`` vs ``alpha_gt * weight``.

    L1 and composition terms are averaged over weighted pixels (composition sums
    |.| over RGB first); the Laplacian term is ``sum_k 2^(k-1) mean|band_k|``.
    An all-zero weight map gives a loss of exactly 0.
    """
    weight = np.asarray(weight)
    gt = alpha_gt.data if isinstance(alpha_gt, Tensor) else np.asarray(alpha_gt)
    fg = fg.data if isinstance(fg, Tensor) else np.asarray(fg)
    bg = bg.data if isinstance(bg, Tensor) else np.asarray(bg)
    if not (alpha.shape == gt.shape == weight.shape) or fg.shape != bg.shape or fg.shape[2:] != alpha.shape[2:]:
        raise T.ShapeError(f"matting_loss: shapes alpha {alpha.shape}, gt {gt.shape}, weight {weight.shape}, "
                           f"fg {fg.shape}, bg {bg.shape} are inconsistent")
    wsum = float(weight.sum())
    if wsum == 0:
        return Tensor(0.0, dtype=alpha.data.dtype)
    w = _const(weight, alpha)
    diff = T.mul(T.sub(alpha, _const(gt, alpha)), w)
    npix = diff.data.size
    l1 = T.affine(T.mean_abs(diff), npix / wsum)
    chans = fg.shape[1]
    comp_diff = T.mul(T.concat([diff] * chans), _const(fg - bg, alpha))
    comp = T.affine(T.mean_abs(comp_diff), chans * npix / wsum)
    lap = None
    for k, band in enumerate(laplacian_pyramid(diff)):
        term = T.affine(T.mean_abs(band), 2.0 ** k)
        lap = term if lap is None else T.add(lap, term)
    return T.add(T.add(l1, comp), lap)


def _resize_const(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    return T.resize_bilinear(Tensor(arr, dtype=arr.dtype), h, w).data


def total_loss(outputs, alpha_gt: np.ndarray, fg: np.ndarray, bg: np.ndarray,
               omega: Sequence[float] = (1.0, 2.0, 3.0), return_terms: bool = False):
    """``sum_l omega_l * matting_loss`` over scales 1/8, 1/4, 1.

    Each scale uses its refined alpha and unknown-band mask from ``outputs``
    (all-ones at 1/8); ground truth, foreground and background are bilinearly
    resized to the scale.
    """
    omega = tuple(float(o) for o in omega)
    if len(omega) != 3 or any(o <= 0 for o in omega):
        raise ValueError(f"omega needs three positive weights for scales 1/8, 1/4, 1; got {omega}")
    h, w = alpha_gt.shape[2:]
    total = None
    terms = {}
    for s, weight in zip((8, 4, 1), omega):
        hs, ws = h // s, w // s
        term = matting_loss(outputs.alpha_refined[s], _resize_const(alpha_gt, hs, ws),
                            _resize_const(fg, hs, ws), _resize_const(bg, hs, ws), outputs.unknown[s])
        terms[s] = term
        scaled = T.affine(term, weight)
        total = scaled if total is None else T.add(total, scaled)
    return (total, terms) if return_terms else total
