"""Train both stages on a handful of synthetic portraits and look at the result.

Run from the repository root:

    python3 demos/overfit_walkthrough.py [outdir]

Takes about five minutes on one core.  Writes predicted alphas, masks and
green composites next to the ground truth so the refinement can be inspected.
"""
import sys
import time
from pathlib import Path

import numpy as np

from sghm import data as D
from sghm import train as TR
from sghm.metrics import evaluate_pair
from sghm.model import SGHM, ModelConfig

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

samples = D.gen_dataset(8, 64, seed=0)
model = SGHM(ModelConfig())

# Stage 1: encoder and segmentation decoder learn the coarse person mask.
t0 = time.perf_counter()
seg = TR.train_segmentation(model, samples, TR.TrainConfig(lr_seg=1e-3, batch_size=4))
print(f"stage 1: bce {seg.losses[0]:.3f} -> {seg.losses[-1]:.3f}, "
      f"mask IoU {TR.seg_iou(model, samples):.3f} ({time.perf_counter() - t0:.0f}s)")

# Stage 2: the segmentation branch is frozen; only the matting decoder trains,
# reading perturbed masks so it does not trust them blindly.
t0 = time.perf_counter()
mat = TR.train_matting(model, samples, TR.TrainConfig(lr_mat=5e-3, batch_size=4, steps_mat=1200))
print(f"stage 2: loss {mat.losses[0]:.3f} -> {mat.losses[-1]:.3f}, "
      f"train MAD {TR.train_set_mad(model, samples):.2f} ({time.perf_counter() - t0:.0f}s)")

alphas = TR.predict_alpha(model, samples)
masks = TR.mask_as_alpha(model, samples)
green = np.array([0, 1, 0], np.float32)[:, None, None] * np.ones((3, 64, 64), np.float32)
for i, (s, a, m) in enumerate(zip(samples, alphas, masks)):
    D.write_png(out / f"{i:02d}_gt.png", s.alpha)
    D.write_png(out / f"{i:02d}_alpha.png", a)
    D.write_png(out / f"{i:02d}_mask.png", m)
    D.write_png(out / f"{i:02d}_green.png", D.composite(s.image, green, a))

# The binary mask is already decent, the matte should beat it on soft edges.
for label, pred in (("binary mask", masks), ("matte", alphas)):
    recs = [evaluate_pair(p[0], s.alpha[0]) for p, s in zip(pred, samples)]
    mean = {k: np.mean([r[k] for r in recs]) for k in ("mad", "mse", "grad", "conn")}
    print(f"{label:12s} " + "  ".join(f"{k}={v:.3f}" for k, v in mean.items()))
print(f"images in {out}/")
