"""The semantic-guided matting network.

A shared encoder (image downsampled 4x, residual stages, ASPP) yields the
pyramid F0..F4 at 1/4..1/64 of the input.  The segmentation decoder turns it
into a soft mask S at 1/4 scale.  The matting decoder fuses each pyramid level
(and, above 1/4 scale, the resized image) with S through attentive shortcut
modules, predicts raw alphas at 1/8, 1/4 and full scale, and progressive
refinement keeps confident coarse alpha while replacing the unknown band.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from . import tensor as T
from .nn import (ASPP, ECA, BatchNorm2d, Conv2d, ConvBNReLU, ConvTranspose2d, Module,
                 ResidualBlock)
from .tensor import Tensor

DOWNSAMPLE = 4
OUTPUT_SCALES = (8, 4, 1)
# matting decoder scale denominators, coarse to fine
DECODER_SCALES = (64, 32, 16, 8, 4, 2, 1)
UNKNOWN_EPS = 1e-3
RADIUS_REFERENCE = 64


@dataclass
class ModelConfig:
    widths: tuple = field(default=(16, 32, 64, 128, 128), metadata={
        "help": "encoder stage widths; stages emit 1/4, 1/8, 1/16, 1/32, 1/64 features"})
    blocks: int = field(default=2, metadata={"help": "residual blocks per encoder stage"})
    aspp_rates: tuple = field(default=(1, 2, 4), metadata={"help": "ASPP dilation rates"})
    eca_kernel: int = field(default=3, metadata={"help": "ECA 1-D kernel length (odd)"})
    seg_widths: tuple = field(default=(64, 32, 16), metadata={
        "help": "segmentation decoder widths for X3, X2, X1 (X0 is the 1-channel mask logit)"})
    mat_widths: tuple = field(default=(64, 64, 32, 32, 16, 16, 8), metadata={
        "help": "matting decoder / ASM channels at scales 1/64, 1/32, 1/16, 1/8, 1/4, 1/2, 1"})
    prm_radius_quarter: int = field(default=1, metadata={
        "help": "unknown-band dilation radius at 1/4 scale for a 64 px input (scaled linearly)"})
    prm_radius_full: int = field(default=4, metadata={
        "help": "unknown-band dilation radius at full scale for a 64 px input (scaled linearly)"})
    use_asm: bool = field(default=True, metadata={
        "help": "attentive shortcut (spectral-norm convs + ECA); false uses plain conv-BN-ReLU"})
    mask_guidance: bool = field(default=True, metadata={
        "help": "feed the segmentation mask to the matting decoder; false feeds zeros"})
    shared_encoder: bool = field(default=True, metadata={
        "help": "matting decoder reuses the segmentation encoder; false trains a separate one"})
    prm_invert_band: bool = field(default=False, metadata={
        "help": "debug: invert the refinement mask (keep raw alpha outside the unknown band)"})
    sn_iters: int = field(default=1, metadata={"help": "power iterations per training forward"})
    model_seed: int = field(default=0, metadata={"help": "parameter initialization seed"})

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.aspp_rates = tuple(int(r) for r in self.aspp_rates)
        self.seg_widths = tuple(int(w) for w in self.seg_widths)
        self.mat_widths = tuple(int(w) for w in self.mat_widths)
        if len(self.widths) != 5:
            raise ValueError("widths needs five entries (1/4 .. 1/64)")
        if len(self.seg_widths) != 3:
            raise ValueError("seg_widths needs three entries (X3, X2, X1)")
        if len(self.mat_widths) != len(DECODER_SCALES):
            raise ValueError(f"mat_widths needs {len(DECODER_SCALES)} entries")
        if self.eca_kernel % 2 == 0:
            raise ValueError("eca_kernel must be odd")


def check_input_size(h: int, w: int) -> None:
    if h % 64 or w % 64 or h == 0 or w == 0:
        raise T.ShapeError(f"input size {h}x{w} is not a positive multiple of 64; pad the image first")


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        w = cfg.widths
        self.stem = ConvBNReLU(3, w[0], 3, rng)
        self.stages = []
        cin = w[0]
        for i, cout in enumerate(w):
            stride = 1 if i == 0 else 2
            blocks = [ResidualBlock(cin, cout, rng, stride=stride)]
            blocks += [ResidualBlock(cout, cout, rng) for _ in range(cfg.blocks - 1)]
            self.stages.append(_Sequential(blocks))
            cin = cout
        self.aspp = ASPP(w[4], w[4], rng, cfg.aspp_rates)

    def forward(self, image: Tensor) -> list[Tensor]:
        h, w = image.shape[2:]
        check_input_size(h, w)
        x = self.stem(T.resize_bilinear(image, h // DOWNSAMPLE, w // DOWNSAMPLE))
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        feats[4] = self.aspp(feats[4])
        return feats


class _Sequential(Module):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class SegDecoder(Module):
    """``X_i = ConvBNReLU(concat(up(X_{i+1}), F_i))`` for i = 3..1, then a plain conv for X0."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        w, s = cfg.widths, cfg.seg_widths
        self.convs = [
            ConvBNReLU(w[4] + w[3], s[0], 3, rng),
            ConvBNReLU(s[0] + w[2], s[1], 3, rng),
            ConvBNReLU(s[1] + w[1], s[2], 3, rng),
        ]
        self.head = Conv2d(s[2] + w[0], 1, 3, rng)

    def forward(self, feats: list[Tensor]) -> Tensor:
        if len(feats) != 5:
            raise T.ShapeError(f"segmentation decoder needs 5 features, got {len(feats)}")
        x = feats[4]
        for i, conv in zip((3, 2, 1), self.convs):
            x = conv(_cat_up(x, feats[i]))
        return T.sigmoid(self.head(_cat_up(x, feats[0])))


def _cat_up(x: Tensor, skip: Tensor) -> Tensor:
    h, w = skip.shape[2:]
    if (x.shape[2] * 2, x.shape[3] * 2) != (h, w):
        raise T.ShapeError(f"feature pyramid mismatch: {x.shape} cannot be upsampled 2x to {skip.shape}")
    return T.concat([T.resize_bilinear(x, h, w), skip])


class ASM(Module):
    """Attentive shortcut: concat(feature, mask) -> 2 x (SN conv, BN, ReLU) -> ECA.

    With ``use_asm=False`` the convs are plain and ECA is dropped.
    """

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, use_asm: bool = True,
                 eca_kernel: int = 3, sn_iters: int = 1):
        self.conv1 = ConvBNReLU(cin + 1, cout, 3, rng, spectral=use_asm)
        self.conv2 = ConvBNReLU(cout, cout, 3, rng, spectral=use_asm)
        for c in (self.conv1.conv, self.conv2.conv):
            c.sn_iters = sn_iters
        self.eca = ECA(cout, rng, eca_kernel) if use_asm else None

    def forward(self, feature: Tensor, mask: Tensor) -> Tensor:
        h, w = feature.shape[2:]
        m = T.resize_bilinear(mask, h, w)
        if m.shape[2:] != (h, w):
            raise T.ShapeError("ASM: mask/feature spatial mismatch")
        y = self.conv2(self.conv1(T.concat([feature, m])))
        return self.eca(y) if self.eca is not None else y


class _ResUp(Module):
    def __init__(self, cin, cout, rng):
        self.block = ResidualBlock(cin, cout, rng)

    def forward(self, x):
        y = self.block(x)
        return T.resize_bilinear(y, 2 * y.shape[2], 2 * y.shape[3])


class _TransposeUp(Module):
    def __init__(self, cin, cout, rng):
        self.deconv = ConvTranspose2d(cin, cout, 4, rng, stride=2, padding=1, bias=False)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        return T.relu(self.bn(self.deconv(x)))


class _OutputBlock(Module):
    def __init__(self, c, rng):
        self.body = ConvBNReLU(c, c, 3, rng)
        self.out = Conv2d(c, 1, 3, rng)

    def forward(self, x):
        return T.sigmoid(self.out(self.body(x)))


class MattingDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        w, m = cfg.widths, cfg.mat_widths
        skip_channels = (w[4], w[3], w[2], w[1], w[0], 3, 3)
        self.asms = [ASM(c, o, rng, cfg.use_asm, cfg.eca_kernel, cfg.sn_iters)
                     for c, o in zip(skip_channels, m)]
        self.ups = [_ResUp(m[i - 1], m[i], rng) if DECODER_SCALES[i] >= 4 else _TransposeUp(m[i - 1], m[i], rng)
                    for i in range(1, len(m))]
        self.heads = [_OutputBlock(m[DECODER_SCALES.index(s)], rng) for s in OUTPUT_SCALES]

    def forward(self, feats: list[Tensor], mask: Tensor, image: Tensor) -> dict[int, Tensor]:
        h, w = image.shape[2:]
        skips = [feats[4], feats[3], feats[2], feats[1], feats[0],
                 T.resize_bilinear(image, h // 2, w // 2), image]
        for s, f in zip(DECODER_SCALES, skips):
            if f.shape[2:] != (h // s, w // s):
                raise T.ShapeError(f"matting decoder: skip at 1/{s} has size {f.shape[2:]}")
        raw = {}
        x = self.asms[0](skips[0], mask)
        for i in range(1, len(DECODER_SCALES)):
            x = T.add(self.ups[i - 1](x), self.asms[i](skips[i], mask))
            s = DECODER_SCALES[i]
            if s in OUTPUT_SCALES:
                raw[s] = self.heads[OUTPUT_SCALES.index(s)](x)
        return raw


def unknown_band(alpha_prev: np.ndarray, radius: int) -> np.ndarray:
    """1 where ``UNKNOWN_EPS < alpha < 1 - UNKNOWN_EPS``, dilated by a square of
    half-width ``radius``; returned with the input's shape and dtype."""
    band = (alpha_prev > UNKNOWN_EPS) & (alpha_prev < 1 - UNKNOWN_EPS)
    if radius > 0:
        size = (1,) * (band.ndim - 2) + (2 * radius + 1, 2 * radius + 1)
        band = ndimage.maximum_filter(band, size=size, mode="constant", cval=False)
    return band.astype(alpha_prev.dtype)


def prm_fuse(alpha_prev: Tensor, alpha_raw: Tensor, radius: int,
             invert_band: bool = False) -> tuple[Tensor, np.ndarray]:
    """Blend ``alpha_raw`` into the unknown band of ``alpha_prev``.

    Returns ``(alpha_refined, u)`` with ``alpha_refined = raw * u + prev * (1 - u)``;
    outside the band the previous alpha is passed through exactly.
    """
    if alpha_prev.shape != alpha_raw.shape:
        raise T.ShapeError(f"prm_fuse: size mismatch {alpha_prev.shape} vs {alpha_raw.shape}")
    if radius < 0:
        raise ValueError("prm_fuse: radius must be >= 0")
    u = unknown_band(alpha_prev.data, radius)
    if invert_band:
        u = 1 - u
    refined = T.add(T.mul(alpha_raw, Tensor(u, dtype=u.dtype)), T.mul(alpha_prev, Tensor(1 - u, dtype=u.dtype)))
    return refined, u


def scaled_radius(base: int, size: int) -> int:
    return int(round(base * size / RADIUS_REFERENCE))


@dataclass
class ForwardOutputs:
    seg: Tensor
    mask_used: Tensor
    alpha_raw: dict
    alpha_refined: dict
    unknown: dict
    alpha_prev: dict

    @property
    def alpha(self) -> Tensor:
        return self.alpha_refined[1]


class SGHM(Module):
    GROUPS = ("encoder", "seg", "mat")

    def __init__(self, cfg: Optional[ModelConfig] = None):
        self.cfg = cfg or ModelConfig()
        enc_ss, seg_ss, mat_ss, menc_ss = np.random.SeedSequence(self.cfg.model_seed).spawn(4)
        self.encoder = Encoder(self.cfg, np.random.default_rng(enc_ss))
        self.seg = SegDecoder(self.cfg, np.random.default_rng(seg_ss))
        self.mat = MattingDecoder(self.cfg, np.random.default_rng(mat_ss))
        self.mat_encoder = None if self.cfg.shared_encoder else Encoder(self.cfg, np.random.default_rng(menc_ss))

    def group_of(self, name: str) -> str:
        head = name.split(".", 1)[0]
        return "mat" if head == "mat_encoder" else head

    def group_modules(self, group: str) -> list[Module]:
        if group == "mat":
            return [m for m in (self.mat, self.mat_encoder) if m is not None]
        return [getattr(self, group)]

    def segment(self, image: Tensor) -> tuple[list[Tensor], Tensor]:
        feats = self.encoder(image)
        return feats, self.seg(feats)

    def forward(self, image: Tensor, perturb: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> ForwardOutputs:
        feats, seg = self.segment(image)
        mask = seg
        if perturb is not None:
            mask = Tensor(perturb(seg.data), dtype=seg.data.dtype)
        if not self.cfg.mask_guidance:
            mask = Tensor(np.zeros_like(seg.data), dtype=seg.data.dtype)
        mfeats = feats if self.mat_encoder is None else self.mat_encoder(image)
        raw = self.mat(mfeats, mask, image)
        h, w = image.shape[2:]
        size = min(h, w)
        a8 = raw[8]
        prev4 = T.resize_bilinear(a8, h // 4, w // 4)
        r4, u4 = prm_fuse(prev4, raw[4], scaled_radius(self.cfg.prm_radius_quarter, size), self.cfg.prm_invert_band)
        prev1 = T.resize_bilinear(r4, h, w)
        r1, u1 = prm_fuse(prev1, raw[1], scaled_radius(self.cfg.prm_radius_full, size), self.cfg.prm_invert_band)
        return ForwardOutputs(
            seg=seg,
            mask_used=mask,
            alpha_raw=raw,
            alpha_refined={8: a8, 4: r4, 1: r1},
            unknown={8: np.ones_like(a8.data), 4: u4, 1: u1},
            alpha_prev={4: prev4, 1: prev1},
        )

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Every parameter and buffer by stable name (checkpoint payload)."""
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(self.named_buffers())
        return out

    def set_group_trainable(self, group: str, flag: bool) -> None:
        for m in self.group_modules(group):
            m.requires_grad_(flag)
