"""Evaluation metrics: MAE x 100, PSNR, and single-scale SSIM.

All metrics operate on [0, 1] images in the same gamma-corrected domain the
models train in. PSNR uses peak 1 over all pixels and channels jointly and
reports +inf for identical images. SSIM uses the reference constants: 11x11
Gaussian window with sigma 1.5, K1 = 0.01, K2 = 0.03, L = 1, averaged over
valid window positions and channels.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .lightfield import LightField, ViewCoord, corner_views, noncorner_coords
from .networks import ModelWeights
from .pipeline import synthesize

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class MetricError(ValueError):
    pass


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return pred, gt


def mae100(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean absolute error scaled by 100 for images in [0, 1]."""
    pred, gt = _check_pair(pred, gt)
    return float(100.0 * np.abs(pred - gt).mean())


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB; +inf when the images coincide."""
    pred, gt = _check_pair(pred, gt)
    mse = float(((pred - gt) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return float(10.0 * math.log10(1.0 / mse))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2
    x = np.arange(size) - half
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _windowed_mean(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Gaussian-weighted local means, valid positions only."""
    half = (len(window) - 1) // 2
    out = correlate1d(img, window, axis=0, mode="constant")
    out = correlate1d(out, window, axis=1, mode="constant")
    return out[half:-half, half:-half]


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """Standard single-scale SSIM, per channel then averaged."""
    pred, gt = _check_pair(pred, gt)
    if pred.ndim == 2:
        pred = pred[None]
        gt = gt[None]
    if pred.ndim != 3:
        raise MetricError(f"expected (C, H, W) or (H, W) images, got {pred.shape}")
    c, h, w = pred.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise MetricError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    window = _gaussian_window()
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    values = []
    for ch in range(c):
        x, y = pred[ch], gt[ch]
        mx = _windowed_mean(x, window)
        my = _windowed_mean(y, window)
        sxx = _windowed_mean(x * x, window) - mx * mx
        syy = _windowed_mean(y * y, window) - my * my
        sxy = _windowed_mean(x * y, window) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        values.append(float((num / den).mean()))
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# grid evaluation


@dataclass(frozen=True)
class ViewScore:
    p: int
    q: int
    mae100: float
    psnr_db: float
    ssim: float


@dataclass
class EvalReport:
    """Per-view scores over all in-between integer positions, corners
    excluded, plus their arithmetic means."""

    views: list[ViewScore]

    @property
    def mae100(self) -> float:
        return float(np.mean([v.mae100 for v in self.views]))

    @property
    def psnr_db(self) -> float:
        return float(np.mean([v.psnr_db for v in self.views]))

    @property
    def ssim(self) -> float:
        return float(np.mean([v.ssim for v in self.views]))

    def row_slice(self, p: int) -> list[ViewScore]:
        return [v for v in self.views if v.p == p]

    def diagonal_slice(self) -> list[ViewScore]:
        return [v for v in self.views if v.p == v.q]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["p", "q", "mae100", "psnr_db", "ssim"])
            for v in self.views:
                writer.writerow([v.p, v.q, repr(v.mae100), repr(v.psnr_db), repr(v.ssim)])

    def to_json(self, path: str | Path) -> None:
        doc = {
            "aggregate": {"mae100": self.mae100, "psnr_db": self.psnr_db, "ssim": self.ssim},
            "views": [vars(v) for v in self.views],
            "diagonal": [vars(v) for v in self.diagonal_slice()],
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def evaluate_grid(
    weights: ModelWeights, lf: LightField, crop: int = 0, bn_mode: str = "batch"
) -> EvalReport:
    """Synthesize every non-corner integer view and score it against the
    stored one. ``crop`` strips a border before scoring (off by default)."""
    if lf.n < 2:
        raise MetricError("grid evaluation needs at least 3x3 views")
    corners = corner_views(lf)
    scores = []
    for p, q in noncorner_coords(lf.n):
        result = synthesize(weights, corners, ViewCoord(float(p), float(q)), lf.n,
                            bn_mode=bn_mode)
        pred = np.clip(result.predicted, 0.0, 1.0)
        gt = lf.view(int(p), int(q))
        if crop > 0:
            pred = pred[:, crop:-crop, crop:-crop]
            gt = gt[:, crop:-crop, crop:-crop]
        scores.append(
            ViewScore(int(p), int(q), mae100(pred, gt), psnr(pred, gt), ssim(pred, gt))
        )
    return EvalReport(scores)
