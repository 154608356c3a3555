"""Two-stage training: encoder + segmentation decoder first, then the matting decoder."""
from __future__ import annotations

from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, TextIO, Union

import numpy as np

from . import tensor as T
from .data import AugmentPolicy, Sample, augment, perturb_mask
from .losses import bce_loss, seg_target, total_loss
from .model import SGHM
from .optim import Adam, cosine_lr
from .tensor import NonFiniteError, Tape, Tensor


class TrainingDiverged(NonFiniteError):
    def __init__(self, stage: str, step: int, detail: str = ""):
        self.stage, self.step = stage, step
        super().__init__(f"{stage} training produced a non-finite loss at step {step}" +
                         (f": {detail}" if detail else ""))


@dataclass
class TrainConfig:
    lr_seg: float = field(default=5e-4, metadata={"help": "stage-1 initial learning rate (cosine decay)"})
    lr_mat: float = field(default=1e-3, metadata={"help": "stage-2 initial learning rate (cosine decay)"})
    steps_seg: int = field(default=300, metadata={"help": "stage-1 optimizer steps"})
    steps_mat: int = field(default=800, metadata={"help": "stage-2 optimizer steps"})
    batch_size: int = field(default=2, metadata={"help": "samples per step"})
    omega: tuple = field(default=(1.0, 2.0, 3.0), metadata={"help": "loss weights for scales 1/8, 1/4, 1"})
    seed: int = field(default=0, metadata={"help": "batch order, augmentation and perturbation seed"})
    augment: bool = field(default=False, metadata={"help": "apply the random augmentation policy"})
    crop_seg: int = field(default=64, metadata={"help": "stage-1 augmentation crop size"})
    crop_mat: int = field(default=64, metadata={"help": "stage-2 augmentation crop size"})
    mask_perturb: float = field(default=0.5, metadata={"help": "stage-2 mask perturbation strength in [0, 1]"})
    num_samples: int = field(default=8, metadata={"help": "synthetic samples when no dataset is given"})
    sample_size: int = field(default=64, metadata={"help": "synthetic sample side length"})
    data_seed: int = field(default=0, metadata={"help": "synthetic dataset seed"})

    def __post_init__(self):
        self.omega = tuple(float(o) for o in self.omega)
        if len(self.omega) != 3 or any(o <= 0 for o in self.omega):
            raise ValueError(f"omega needs exactly three positive weights, got {self.omega}")
        for name in ("steps_seg", "steps_mat", "batch_size", "crop_seg", "crop_mat", "sample_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_samples < 0:
            raise ValueError("num_samples must be >= 0")
        if not 0.0 <= self.mask_perturb <= 1.0:
            raise ValueError("mask_perturb must lie in [0, 1]")
        if self.lr_seg <= 0 or self.lr_mat <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    optimizer: Optional[Adam] = None


def stack(samples: Sequence[Sample]) -> dict[str, np.ndarray]:
    """Batch samples into ``(B, C, H, W)`` arrays keyed by part name."""
    return {p: np.stack([getattr(s, p) for s in samples]) for p in ("image", "fg", "bg", "alpha", "mask")}


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches drawn from fresh permutations."""
    order = []
    while True:
        while len(order) < batch_size:
            order.extend(rng.permutation(n).tolist())
        yield order[:batch_size]
        order = order[batch_size:]


def _stage_rng(seed: int, stage: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stage]))


def _prepare(samples, idx, rng, policy: Optional[AugmentPolicy]):
    picked = [samples[i] for i in idx]
    if policy is not None:
        picked = [augment(s, int(rng.integers(2 ** 31)), policy) for s in picked]
    return stack(picked)


def _log(handle: Optional[TextIO], step: int, lr: float, loss: float) -> None:
    if handle is not None:
        handle.write(f"{step}\t{lr:.8g}\t{loss:.8g}\n")


def _open_log(path):
    return open(path, "w", encoding="utf-8", newline="\n") if path is not None else nullcontext()


def _trainable(model: SGHM, groups) -> dict[str, Tensor]:
    return {k: p for k, p in model.named_parameters() if model.group_of(k) in groups}


def train_segmentation(model: SGHM, samples: Sequence[Sample], cfg: TrainConfig,
                       log_path: Union[str, Path, None] = None) -> TrainResult:
    """Optimize encoder and segmentation decoder under BCE against the 1/4-scale mask."""
    if not samples:
        raise ValueError("train_segmentation: empty training set")
    for g in ("encoder", "seg"):
        model.set_group_trainable(g, True)
    model.set_group_trainable("mat", False)
    model.train()
    params = _trainable(model, ("encoder", "seg"))
    opt = Adam(params)
    rng = _stage_rng(cfg.seed, 1)
    policy = AugmentPolicy.for_stage("seg", cfg.crop_seg) if cfg.augment else None
    stream = _batches(len(samples), cfg.batch_size, rng)
    result = TrainResult(optimizer=opt)
    with _open_log(log_path) as log:
        for step in range(cfg.steps_seg):
            batch = _prepare(samples, next(stream), rng, policy)
            lr = cosine_lr(cfg.lr_seg, step, cfg.steps_seg)
            model.zero_grad()
            try:
                with Tape() as tape:
                    _, seg = model.segment(Tensor(batch["image"]))
                    loss = bce_loss(seg, seg_target(batch["mask"], seg.shape[2:]))
                    tape.backward(loss)
            except NonFiniteError as exc:
                raise TrainingDiverged("segmentation", step, str(exc)) from exc
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged("segmentation", step)
            opt.step(lr)
            result.losses.append(value)
            _log(log, step, lr, value)
    return result


def freeze_segmentation(model: SGHM) -> None:
    """Stage-2 freeze: encoder and segmentation decoder in inference mode, no gradients."""
    for g in ("encoder", "seg"):
        model.set_group_trainable(g, False)
        for m in model.group_modules(g):
            m.eval()


def train_matting(model: SGHM, samples: Sequence[Sample], cfg: TrainConfig,
                  log_path: Union[str, Path, None] = None) -> TrainResult:
    """Optimize the matting decoder (and ASMs) under the multi-scale loss.

    The predicted mask is perturbed independently per sample and step before
    it reaches the matting decoder.
    """
    if not samples:
        raise ValueError("train_matting: empty training set")
    model.train()
    model.set_group_trainable("mat", True)
    freeze_segmentation(model)
    params = _trainable(model, ("mat",))
    opt = Adam(params)
    rng = _stage_rng(cfg.seed, 2)
    policy = AugmentPolicy.for_stage("mat", cfg.crop_mat) if cfg.augment else None
    stream = _batches(len(samples), cfg.batch_size, rng)
    result = TrainResult(optimizer=opt)
    with _open_log(log_path) as log:
        for step in range(cfg.steps_mat):
            batch = _prepare(samples, next(stream), rng, policy)
            seeds = rng.integers(2 ** 31, size=cfg.batch_size)
            lr = cosine_lr(cfg.lr_mat, step, cfg.steps_mat)

            def perturb(seg: np.ndarray) -> np.ndarray:
                return np.stack([perturb_mask(m, int(s), cfg.mask_perturb) for m, s in zip(seg, seeds)])

            model.zero_grad()
            try:
                with Tape() as tape:
                    out = model(Tensor(batch["image"]), perturb=perturb if cfg.mask_perturb > 0 else None)
                    loss = total_loss(out, batch["alpha"], batch["fg"], batch["bg"], cfg.omega)
                    tape.backward(loss)
            except NonFiniteError as exc:
                raise TrainingDiverged("matting", step, str(exc)) from exc
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged("matting", step)
            opt.step(lr)
            result.losses.append(value)
            _log(log, step, lr, value)
    return result


# -- inference helpers ------------------------------------------------------------------

def predict_masks(model: SGHM, samples: Sequence[Sample], batch_size: int = 4) -> np.ndarray:
    """Eval-mode segmentation probabilities ``(N, 1, H/4, W/4)``."""
    model.eval()
    out = []
    for i in range(0, len(samples), batch_size):
        _, seg = model.segment(Tensor(stack(samples[i:i + batch_size])["image"]))
        out.append(seg.data)
    return np.concatenate(out)


def predict_alpha(model: SGHM, samples: Sequence[Sample], batch_size: int = 4) -> np.ndarray:
    """Eval-mode final alpha ``(N, 1, H, W)``."""
    model.eval()
    out = []
    for i in range(0, len(samples), batch_size):
        out.append(model(Tensor(stack(samples[i:i + batch_size])["image"])).alpha.data)
    return np.concatenate(out)


def mask_iou(prob: np.ndarray, target: np.ndarray, threshold: float = 0.5) -> float:
    pred = prob >= threshold
    gt = target >= 0.5
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def seg_iou(model: SGHM, samples: Sequence[Sample]) -> float:
    """IoU of the thresholded predicted mask against the 1/4-scale target mask, pooled over samples."""
    probs = predict_masks(model, samples)
    targets = seg_target(stack(samples)["mask"], probs.shape[2:])
    return mask_iou(probs, targets)


def mask_as_alpha(model: SGHM, samples: Sequence[Sample]) -> np.ndarray:
    """Baseline: thresholded segmentation mask upsampled to full size and used as alpha."""
    probs = predict_masks(model, samples)
    h, w = samples[0].size
    up = T.resize_bilinear(Tensor(probs), h, w).data
    return (up >= 0.5).astype(np.float32)


def train_set_mad(model: SGHM, samples: Sequence[Sample]) -> float:
    pred = predict_alpha(model, samples).astype(np.float64)
    return float(1000.0 * np.abs(pred - stack(samples)["alpha"]).mean())
