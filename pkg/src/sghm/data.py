"""Procedural matting samples, augmentation, mask perturbation and PNG datasets.

Every generator here is a pure function of its seed.  Arrays are channel-first
float32: ``fg``/``bg``/``image`` are ``(3, H, W)``, ``alpha``/``mask`` are
``(1, H, W)``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.special import ndtr

PARTS = ("image", "fg", "bg", "alpha", "mask")


class DatasetError(OSError):
    pass


@dataclass
class Sample:
    fg: np.ndarray
    bg: np.ndarray
    alpha: np.ndarray
    image: np.ndarray
    mask: np.ndarray

    @property
    def size(self) -> tuple[int, int]:
        return self.alpha.shape[1], self.alpha.shape[2]

    def copy(self) -> "Sample":
        return Sample(*(np.array(getattr(self, p)) for p in ("fg", "bg", "alpha", "image", "mask")))


def composite(fg: np.ndarray, bg: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """``alpha * fg + (1 - alpha) * bg``; alpha is single-channel and broadcasts."""
    fg, bg, alpha = np.asarray(fg), np.asarray(bg), np.asarray(alpha)
    if fg.shape != bg.shape:
        raise ValueError(f"composite: foreground {fg.shape} and background {bg.shape} differ")
    if alpha.ndim != fg.ndim or alpha.shape[0] != 1 or alpha.shape[1:] != fg.shape[1:]:
        raise ValueError(f"composite: alpha must be (1, H, W) matching {fg.shape}, got {alpha.shape}")
    a = alpha.astype(np.float64)
    return (a * fg + (1.0 - a) * bg).astype(np.float32)


def binary_mask(alpha: np.ndarray) -> np.ndarray:
    return (alpha >= 0.5).astype(np.float32)


# -- generation -------------------------------------------------------------------

def _color(rng) -> np.ndarray:
    return rng.uniform(0.05, 0.95, size=3)


def _linear_field(rng, h: int, w: int) -> np.ndarray:
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    proj = np.cos(theta) * xx / max(w - 1, 1) + np.sin(theta) * yy / max(h - 1, 1)
    return (proj - proj.min()) / max(proj.max() - proj.min(), 1e-9)


def gen_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Solid colour, linear gradient, or band-limited noise."""
    kind = int(rng.integers(3))
    if kind == 0:
        bg = np.broadcast_to(_color(rng)[:, None, None], (3, h, w))
    elif kind == 1:
        t = _linear_field(rng, h, w)
        c0, c1 = _color(rng), _color(rng)
        bg = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
    else:
        sigma = min(h, w) / rng.uniform(8, 24)
        noise = ndimage.gaussian_filter(rng.standard_normal((3, h, w)), sigma=(0, sigma, sigma), mode="wrap")
        noise = noise / max(np.abs(noise).max(), 1e-9)
        bg = _color(rng)[:, None, None] + 0.35 * noise
    return np.clip(bg, 0.0, 1.0).astype(np.float32)


def _blob(rng, h: int, w: int, yy, xx):
    s = min(h, w)
    cy, cx = rng.uniform(0.35, 0.65) * h, rng.uniform(0.35, 0.65) * w
    ry, rx = rng.uniform(0.12, 0.28, size=2) * s
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    rho = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
    phi = np.arctan2(v, u)
    wobble = np.zeros_like(phi)
    for k in rng.integers(2, 6, size=3):
        wobble += rng.uniform(-0.12, 0.12) * np.sin(k * phi + rng.uniform(0, 2 * np.pi))
    boundary = 1.0 + wobble
    dist = (boundary - rho) * 0.5 * (rx + ry)  # ~pixels, positive inside
    edge = rng.uniform(0.6, 1.5)
    alpha = ndtr(dist / edge)
    return alpha, (cy, cx, rx, ry, theta, boundary)


def _strand(rng, h: int, w: int, blob_params, tree_pixels):
    cy, cx, rx, ry, theta, _ = blob_params
    s = min(h, w)
    phi = rng.uniform(0, 2 * np.pi)
    direction = np.array([np.sin(phi), np.cos(phi)])
    start = np.array([cy, cx]) + 0.85 * direction * np.array([ry, rx])
    length = rng.uniform(0.15, 0.35) * s
    bend = rng.uniform(-0.5, 0.5)
    turn = np.array([[np.cos(bend), -np.sin(bend)], [np.sin(bend), np.cos(bend)]])
    end = start + length * (turn @ direction)
    normal = np.array([-direction[1], direction[0]])
    ctrl = 0.5 * (start + end) + rng.uniform(-0.3, 0.3) * length * normal
    n = max(int(length * 4), 8)
    t = np.linspace(0.0, 1.0, n)
    pts = ((1 - t) ** 2)[:, None] * start + (2 * (1 - t) * t)[:, None] * ctrl + (t ** 2)[:, None] * end
    width = rng.uniform(1.0, 3.0)
    dist, idx = cKDTree(pts).query(tree_pixels, distance_upper_bound=width + 2)
    hit = np.isfinite(dist)
    profile = np.zeros(len(tree_pixels))
    taper = (1.0 - t[np.minimum(idx[hit], n - 1)]) ** 0.7
    profile[hit] = np.clip(1.0 - dist[hit] / (0.5 * width + 0.5), 0.0, 1.0) * taper
    return rng.uniform(0.6, 1.0) * profile.reshape(h, w)


def gen_sample(seed: int, size: Union[int, tuple[int, int]] = 64) -> Sample:
    """Deterministic synthetic matting sample.

    The alpha is the union of 1-3 wobbly ellipses with Gaussian edge falloff
    and 3-10 tapering quadratic strands (1-3 px wide) standing in for hair.
    """
    h, w = (size, size) if isinstance(size, int) else size
    if h < 64 or w < 64 or h % 64 or w % 64:
        raise ValueError(f"gen_sample: size must be >= 64 and divisible by 64, got {h}x{w}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    pixels = np.stack([yy.ravel(), xx.ravel()], axis=1)

    blobs = [_blob(rng, h, w, yy, xx) for _ in range(int(rng.integers(1, 4)))]
    body = 1.0 - np.prod([1.0 - a for a, _ in blobs], axis=0)

    hair = np.zeros((h, w))
    for _ in range(int(rng.integers(3, 11))):
        params = blobs[int(rng.integers(len(blobs)))][1]
        hair = 1.0 - (1.0 - hair) * (1.0 - _strand(rng, h, w, params, pixels))
    alpha = 1.0 - (1.0 - body) * (1.0 - hair)

    num = np.zeros((3, h, w))
    den = np.full((h, w), 1e-6)
    for a, _ in blobs:
        t = _linear_field(rng, h, w)
        c0, c1 = _color(rng), _color(rng)
        num += a * (c0[:, None, None] * (1 - t) + c1[:, None, None] * t)
        den += a
    fg_body = num / den
    fg_body[:, den < 1e-3] = _color(rng)[:, None]
    hair_color = _color(rng)
    mix = hair / (hair + body + 1e-6)
    fg = (1 - mix) * fg_body + mix * hair_color[:, None, None]
    fg = np.clip(fg, 0.0, 1.0).astype(np.float32)

    bg = gen_background(rng, h, w)
    alpha = np.clip(alpha, 0.0, 1.0).astype(np.float32)[None]
    return Sample(fg=fg, bg=bg, alpha=alpha, image=composite(fg, bg, alpha), mask=binary_mask(alpha))


def gen_dataset(count: int, size=64, seed: int = 0) -> list[Sample]:
    seeds = np.random.SeedSequence(seed).generate_state(count) if count else []
    return [gen_sample(int(s), size) for s in seeds]


# -- augmentation -------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentPolicy:
    rotation: float = 15.0      # degrees, +-
    scale: float = 0.2          # 1 +- scale
    translate: float = 0.1      # fraction of size, +-
    flip_p: float = 0.5
    noise: float = 0.02         # max Gaussian sigma
    jitter: float = 0.2         # brightness / contrast / saturation, +-
    composite_p: float = 0.5
    crop: Optional[int] = None

    @classmethod
    def for_stage(cls, stage: str, crop: Optional[int] = None) -> "AugmentPolicy":
        defaults = {"seg": 320, "mat": 64}
        if stage not in defaults:
            raise ValueError(f"unknown augmentation policy {stage!r}")
        return cls(crop=crop or defaults[stage])

    @classmethod
    def identity(cls, crop: Optional[int] = None) -> "AugmentPolicy":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, crop)


def hflip(sample: Sample) -> Sample:
    return Sample(*(np.ascontiguousarray(getattr(sample, p)[:, :, ::-1])
                    for p in ("fg", "bg", "alpha", "image", "mask")))


def _affine(arr: np.ndarray, matrix: np.ndarray, offset: np.ndarray, order: int, mode: str) -> np.ndarray:
    return np.stack([ndimage.affine_transform(ch, matrix, offset=offset, order=order, mode=mode) for ch in arr])


def _jitter(img: np.ndarray, rng, mag: float) -> np.ndarray:
    b, c, s = rng.uniform(-mag, mag, size=3)
    out = img + b
    mean = out.mean()
    out = (out - mean) * (1 + c) + mean
    gray = out.mean(axis=0, keepdims=True)
    out = gray + (out - gray) * (1 + s)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _has_unknown(alpha: np.ndarray) -> bool:
    return bool(((alpha > 0) & (alpha < 1)).any())


def augment(sample: Sample, seed: int, policy: Union[str, AugmentPolicy] = "mat") -> Sample:
    """Random affine, flip, colour jitter, background swap, pixel noise and crop.

    Geometry is shared by fg/bg/alpha; the image is always recomposited so the
    compositing identity survives.  Pixel noise is added as one field to both
    fg and bg, which puts exactly that noise on the image.  The mask is
    re-derived from the transformed alpha.
    """
    if isinstance(policy, str):
        policy = AugmentPolicy.for_stage(policy)
    rng = np.random.default_rng(seed)
    h, w = sample.size
    crop = policy.crop or min(h, w)
    if crop > h or crop > w:
        raise ValueError(f"augment: crop {crop} larger than sample {h}x{w}")
    fg, bg, alpha = sample.fg, sample.bg, sample.alpha
    changed = False

    if policy.rotation or policy.scale or policy.translate:
        angle = np.deg2rad(rng.uniform(-policy.rotation, policy.rotation))
        zoom = rng.uniform(1 - policy.scale, 1 + policy.scale)
        shift = rng.uniform(-policy.translate, policy.translate, size=2) * np.array([h, w])
        rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        matrix = rot.T / zoom  # output -> input coordinates
        centre = np.array([(h - 1) / 2, (w - 1) / 2])
        offset = centre - matrix @ (centre + shift)
        fg = np.clip(_affine(fg, matrix, offset, 1, "nearest"), 0, 1)
        bg = np.clip(_affine(bg, matrix, offset, 1, "nearest"), 0, 1)
        alpha = np.clip(_affine(alpha, matrix, offset, 1, "constant"), 0, 1)
        changed = True
    if policy.flip_p and rng.random() < policy.flip_p:
        fg, bg, alpha = fg[:, :, ::-1], bg[:, :, ::-1], alpha[:, :, ::-1]
        changed = True
    if policy.jitter:
        fg = _jitter(fg, rng, policy.jitter)
        changed = True
    if policy.composite_p and rng.random() < policy.composite_p:
        bg = gen_background(rng, h, w)
        changed = True
    if policy.noise:
        sigma = rng.uniform(0, policy.noise)
        noise = rng.normal(0.0, sigma, size=(3, h, w))
        fg = np.clip(fg + noise, 0, 1)
        bg = np.clip(bg + noise, 0, 1)
        changed = True

    if changed:
        fg = np.ascontiguousarray(fg, dtype=np.float32)
        bg = np.ascontiguousarray(bg, dtype=np.float32)
        alpha = np.ascontiguousarray(alpha, dtype=np.float32)
        out = Sample(fg, bg, alpha, composite(fg, bg, alpha), binary_mask(alpha))
    else:
        out = sample.copy()
    if crop == h and crop == w:
        return out
    return _random_crop(out, crop, rng)


def _crop(sample: Sample, top: int, left: int, size: int) -> Sample:
    return Sample(*(np.ascontiguousarray(getattr(sample, p)[:, top:top + size, left:left + size])
                    for p in ("fg", "bg", "alpha", "image", "mask")))


def _random_crop(sample: Sample, size: int, rng) -> Sample:
    h, w = sample.size
    for _ in range(10):
        top, left = int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))
        if _has_unknown(sample.alpha[:, top:top + size, left:left + size]):
            return _crop(sample, top, left, size)
    return _crop(sample, (h - size) // 2, (w - size) // 2, size)


# -- mask perturbation ----------------------------------------------------------------

def _disk(r: int) -> np.ndarray:
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return (x * x + y * y) <= r * r


def perturb_mask(mask: np.ndarray, seed: int, strength: float = 0.5) -> np.ndarray:
    """Corrupt a soft mask ``(..., H, W)`` so the matting decoder learns to fix it.

    Always erodes or dilates (disk radius up to ``4 * strength`` px at a 64 px
    reference size); with probability 1/2 each, adds low-frequency noise of
    amplitude ``0.3 * strength`` and stamps 1-2 discs (radius at most
    ``8 * strength`` px) of 0 or 1.  Output is clipped to [0, 1].
    """
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"perturb_mask: strength must lie in [0, 1], got {strength}")
    mask = np.asarray(mask)
    if strength == 0:
        return mask.copy()
    rng = np.random.default_rng(seed)
    h, w = mask.shape[-2:]
    scale = min(h, w) / 64.0
    lead = (1,) * (mask.ndim - 2)
    out = mask.astype(np.float64)

    r = max(1, int(round(strength * 4 * scale * rng.uniform(0.25, 1.0))))
    footprint = _disk(r).reshape(lead + (2 * r + 1, 2 * r + 1))
    morph = ndimage.grey_dilation if rng.random() < 0.5 else ndimage.grey_erosion
    out = morph(out, footprint=footprint, mode="nearest")

    if rng.random() < 0.5:
        coarse = rng.uniform(-1.0, 1.0, size=(4, 4))
        field = ndimage.zoom(coarse, (h / 4, w / 4), order=1, mode="nearest", grid_mode=True)[:h, :w]
        out = out + strength * 0.3 * field

    if rng.random() < 0.5:
        yy, xx = np.mgrid[0:h, 0:w]
        for _ in range(int(rng.integers(1, 3))):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            rad = rng.uniform(0.25, 0.6) * strength * 8 * scale
            disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad
            out[..., disc] = float(rng.integers(2))

    return np.clip(out, 0.0, 1.0).astype(mask.dtype if mask.dtype.kind == "f" else np.float32)


# -- PNG datasets -------------------------------------------------------------------

def _to_u8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)


def write_png(path: Union[str, Path], arr: np.ndarray) -> None:
    """Write a (C, H, W) float array in [0, 1] as 8-bit grayscale or RGB PNG."""
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[0] == 1:
        img = Image.fromarray(_to_u8(arr[0]), mode="L")
    elif arr.ndim == 3 and arr.shape[0] == 3:
        img = Image.fromarray(_to_u8(arr.transpose(1, 2, 0)), mode="RGB")
    elif arr.ndim == 2:
        img = Image.fromarray(_to_u8(arr), mode="L")
    else:
        raise ValueError(f"write_png: unsupported array shape {arr.shape}")
    img.save(path, format="PNG")


def read_png(path: Union[str, Path], channels: int) -> np.ndarray:
    """Read a PNG as float32 (channels, H, W) in [0, 1]."""
    try:
        with Image.open(path) as img:
            img = img.convert("L" if channels == 1 else "RGB")
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    return arr[None] if channels == 1 else arr.transpose(2, 0, 1).copy()


def dataset_write(directory: Union[str, Path], samples: Iterable[Sample]) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for i, s in enumerate(samples):
        for part in PARTS:
            path = directory / f"{i:05d}_{part}.png"
            write_png(path, getattr(s, part))
            written.append(path)
    return written


_NAME = re.compile(r"^(\d{5})_(image|fg|bg|alpha|mask)\.png$")


def dataset_read(directory: Union[str, Path]) -> list[Sample]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"dataset directory {directory} does not exist")
    found: dict[str, set] = {}
    for p in directory.iterdir():
        m = _NAME.match(p.name)
        if m:
            found.setdefault(m.group(1), set()).add(m.group(2))
    missing = [f"{idx}_{part}.png" for idx in sorted(found) for part in PARTS if part not in found[idx]]
    if missing:
        raise DatasetError(f"missing dataset files in {directory}: {', '.join(missing)}")
    samples = []
    for idx in sorted(found):
        parts = {part: read_png(directory / f"{idx}_{part}.png", 1 if part in ("alpha", "mask") else 3)
                 for part in PARTS}
        samples.append(Sample(**parts))
    return samples
