"""Show what each refinement stage changes, on an untrained and a ground-truth prior.

    python3 demos/refinement_steps.py

Runs in a second.  Prints how much of each scale falls into the unknown band
and checks that confident pixels pass through the fusion untouched.
"""
import numpy as np

from sghm import data as D
from sghm import tensor as T
from sghm.model import SGHM, ModelConfig, prm_fuse, scaled_radius
from sghm.tensor import Tensor

sample = D.gen_sample(3, 128)
model = SGHM(ModelConfig()).eval()
out = model(Tensor(sample.image[None]))

print("untrained model (its coarse alpha is soft almost everywhere):")
for s in (4, 1):
    print(f"  1/{s}: unknown fraction {out.unknown[s].mean():.3f}")

# A sharp prior confines the band to the transition region plus its dilation.
prior = T.resize_bilinear(Tensor(sample.alpha[None]), 32, 32)
noisy = Tensor(np.random.default_rng(0).random((1, 1, 32, 32)).astype(np.float32))
print("ground-truth prior at 1/4:")
for radius in (0, 1, scaled_radius(ModelConfig().prm_radius_quarter, 128)):
    fused, band = prm_fuse(prior, noisy, radius)
    print(f"  radius {radius}: unknown fraction {band.mean():.3f}")
keep = band == 0
print(f"  confident pixels unchanged: {np.array_equal(fused.data[keep], prior.data[keep])}")
print(f"  band pixels taken from the new prediction: {np.array_equal(fused.data[~keep], noisy.data[~keep])}")
