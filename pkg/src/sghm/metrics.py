"""Whole-image matting metrics: MAD, MSE, Grad, Conn, and a directory harness."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy import ndimage

from .data import DatasetError, read_png

GRAD_SIGMA = 1.4
CONN_STEP = 0.1
CONN_MIN_D = 0.15
METRIC_KEYS = ("mad", "mse", "grad", "conn")


def _check(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"metric inputs differ in shape: {pred.shape} vs {gt.shape}")
    for label, a in (("prediction", pred), ("ground truth", gt)):
        if not np.all(np.isfinite(a)) or a.min(initial=0.0) < 0.0 or a.max(initial=0.0) > 1.0:
            raise ValueError(f"{label} alpha has values outside [0, 1]")
    return np.squeeze(pred), np.squeeze(gt)


def mad_mse(pred, gt) -> tuple[float, float]:
    """Mean absolute and mean squared error, both scaled by 1000."""
    p, g = _check(pred, gt)
    d = p - g
    return float(1000.0 * np.abs(d).mean()), float(1000.0 * (d * d).mean())


def gaussian_derivative_kernels(sigma: float = GRAD_SIGMA) -> tuple[np.ndarray, np.ndarray]:
    """First-derivative-of-Gaussian kernels ``(hx, hy)`` of radius ceil(3 sigma), unit L2 norm."""
    r = int(math.ceil(3 * sigma))
    t = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-t * t / (2 * sigma * sigma)) / (sigma * math.sqrt(2 * math.pi))
    dg = -t / (sigma * sigma) * g
    hx = np.outer(g, dg)
    hx /= np.sqrt((hx * hx).sum())
    return hx, hx.T.copy()


def gradient_magnitude(alpha: np.ndarray, sigma: float = GRAD_SIGMA) -> np.ndarray:
    hx, hy = gaussian_derivative_kernels(sigma)
    gx = ndimage.convolve(alpha, hx, mode="reflect")
    gy = ndimage.convolve(alpha, hy, mode="reflect")
    return np.sqrt(gx * gx + gy * gy)


def grad_metric(pred, gt, sigma: float = GRAD_SIGMA) -> float:
    """Squared difference of Gaussian-gradient magnitudes, summed, divided by 1000."""
    p, g = _check(pred, gt)
    if p.ndim != 2:
        raise ValueError(f"grad_metric expects a single 2-D alpha, got shape {p.shape}")
    d = gradient_magnitude(p, sigma) - gradient_magnitude(g, sigma)
    return float((d * d).sum() / 1000.0)


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    if connectivity == 8:
        return ndimage.generate_binary_structure(2, 2)
    raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")


def conn_source(pred: np.ndarray, gt: np.ndarray, connectivity: int = 4) -> np.ndarray:
    """Largest connected component of ``(pred >= 0.5) & (gt >= 0.5)``; empty if there is none."""
    both = (pred >= 0.5) & (gt >= 0.5)
    labels, n = ndimage.label(both, structure=_structure(connectivity))
    if n == 0:
        return np.zeros_like(both)
    sizes = np.bincount(labels.ravel())[1:]
    # ties go to the lowest label, i.e. the first component in raster order
    return labels == (int(np.argmax(sizes)) + 1)


def _levels(alpha: np.ndarray, source: np.ndarray, step: float, structure) -> np.ndarray:
    n = int(round(1.0 / step))
    level = np.zeros_like(alpha)
    for k in range(1, n):
        theta = k / n
        labels, _ = ndimage.label(alpha >= theta, structure=structure)
        touching = np.unique(labels[source & (labels > 0)])
        linked = np.isin(labels, touching) & (labels > 0)
        level[linked] = theta
    return level


def conn_details(pred, gt, step: float = CONN_STEP, connectivity: int = 4,
                 min_d: float = CONN_MIN_D) -> tuple[float, bool]:
    """Connectivity error and whether the source region was empty."""
    p, g = _check(pred, gt)
    if p.ndim != 2:
        raise ValueError(f"conn_metric expects a single 2-D alpha, got shape {p.shape}")
    structure = _structure(connectivity)
    source = conn_source(p, g, connectivity)

    def phi(a):
        d = a - _levels(a, source, step, structure)
        return 1.0 - d * (d >= min_d)

    return float(np.abs(phi(p) - phi(g)).sum() / 1000.0), not source.any()


def conn_metric(pred, gt, step: float = CONN_STEP, connectivity: int = 4) -> float:
    return conn_details(pred, gt, step, connectivity)[0]


# -- directory harness -------------------------------------------------------------

@dataclass
class MetricReport:
    records: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def aggregates(self) -> dict[str, float]:
        if not self.records:
            return {k: 0.0 for k in METRIC_KEYS}
        return {k: float(np.mean([r[k] for r in self.records])) for k in METRIC_KEYS}

    def to_tsv(self) -> str:
        lines = ["name\t" + "\t".join(METRIC_KEYS)]
        for r in self.records:
            lines.append(r["name"] + "\t" + "\t".join(repr(r[k]) for k in METRIC_KEYS))
        agg = self.aggregates
        lines.append("mean\t" + "\t".join(repr(agg[k]) for k in METRIC_KEYS))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        doc = {"records": [{k: r[k] for k in ("name",) + METRIC_KEYS} for r in self.records],
               "aggregates": self.aggregates, "metadata": self.metadata}
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"

    def write(self, path: Union[str, Path]) -> tuple[Path, Path]:
        """Write the table to ``path`` and the record document next to it as ``<path>.json``."""
        path = Path(path)
        json_path = path.with_name(path.name + ".json")
        path.write_text(self.to_tsv(), encoding="utf-8")
        json_path.write_text(self.to_json(), encoding="utf-8")
        return path, json_path

    @classmethod
    def read_tsv(cls, path: Union[str, Path]) -> "MetricReport":
        rows = Path(path).read_text(encoding="utf-8").splitlines()
        if not rows or rows[0].split("\t") != ["name", *METRIC_KEYS]:
            raise ValueError(f"{path}: not a metric report")
        records = []
        for line in rows[1:]:
            name, *vals = line.split("\t")
            if name == "mean":
                continue
            records.append({"name": name, **{k: float(v) for k, v in zip(METRIC_KEYS, vals)}})
        return cls(records)


def _pngs(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        raise DatasetError(f"{directory} is not a directory")
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() == ".png"}


def evaluate_pair(pred: np.ndarray, gt: np.ndarray, name: str = "") -> dict:
    mad, mse = mad_mse(pred, gt)
    conn, empty = conn_details(pred, gt)
    return {"name": name, "mad": mad, "mse": mse, "grad": grad_metric(pred, gt), "conn": conn,
            "conn_empty_source": empty}


def evaluate_dir(pred_dir: Union[str, Path], gt_dir: Union[str, Path],
                 checkpoint: Optional[str] = None) -> MetricReport:
    """Score every ``<stem>.png`` in ``pred_dir`` against the same stem in ``gt_dir``."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds, gts = _pngs(pred_dir), _pngs(gt_dir)
    unmatched = sorted(set(preds) ^ set(gts))
    if unmatched:
        where = [f"{s} (only in {pred_dir if s in preds else gt_dir})" for s in unmatched]
        raise DatasetError("unmatched file stems: " + ", ".join(where))
    records, sizes = [], set()
    for stem in sorted(preds):
        p = read_png(preds[stem], 1)[0]
        g = read_png(gts[stem], 1)[0]
        if p.shape != g.shape:
            raise DatasetError(f"{stem}: prediction {p.shape} and ground truth {g.shape} differ in size")
        sizes.add(f"{g.shape[0]}x{g.shape[1]}")
        records.append(evaluate_pair(p, g, stem))
    meta = {"count": len(records), "resolutions": sorted(sizes), "checkpoint": checkpoint,
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "conn_empty_source": [r["name"] for r in records if r["conn_empty_source"]]}
    return MetricReport(records, meta)
