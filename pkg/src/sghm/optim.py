"""Adam with bias correction and a cosine learning-rate schedule."""
from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .tensor import Tensor


def cosine_lr(lr0: float, t: int, total: int) -> float:
    """``lr0 * 0.5 * (1 + cos(pi * t / total))``; t is clamped to [0, total]."""
    if total <= 0:
        return lr0
    t = min(max(t, 0), total)
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total))


class Adam:
    """Adam over a named parameter table.

    Only tensors with ``requires_grad`` at step time are touched, so frozen
    groups stay bitwise unchanged.  Moments are kept in float64.
    """

    def __init__(self, params: Mapping[str, Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros(p.shape) for k, p in self.params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        active = {k: p for k, p in self.params.items() if p.requires_grad}
        missing = [k for k, p in active.items() if p.grad is None]
        if missing:
            raise RuntimeError(f"Adam.step: no gradient for trainable parameters {missing}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in active.items():
            g = p.grad.astype(np.float64)
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Moments as float32 tables plus the step counter (checkpoint payload)."""
        out = {}
        for k in self.params:
            out[f"m.{k}"] = self.m[k].astype(np.float32)
            out[f"v.{k}"] = self.v[k].astype(np.float32)
        out["step"] = np.array([self.t], dtype=np.float32)
        return out

    def load_state_tensors(self, tables: Mapping[str, np.ndarray]) -> None:
        unknown = [k for k in tables if k != "step" and k[2:] not in self.params]
        if unknown:
            raise KeyError(f"optimizer state has unknown entries {sorted(unknown)}")
        for k, arr in tables.items():
            if k == "step":
                self.t = int(arr.reshape(-1)[0])
            elif k.startswith("m."):
                self.m[k[2:]] = arr.astype(np.float64).reshape(self.params[k[2:]].shape)
            elif k.startswith("v."):
                self.v[k[2:]] = arr.astype(np.float64).reshape(self.params[k[2:]].shape)
