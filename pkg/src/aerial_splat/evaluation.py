"""Depth-grid, point-cloud and image metrics with flat JSON reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from .losses import ssim

DEFAULT_THRESHOLDS = (0.6, 0.8, 1.0)
MAX_DEPTH_ERROR = 10.0
PSNR_CAP = 99.0


class MetricError(ValueError):
    pass


def _key(tau: float) -> str:
    return f"{float(tau):g}"


@dataclass
class DepthEvalReport:
    mae: float
    rmse: float
    pag: dict  # threshold -> percentage
    valid_count: int
    excluded_count: int
    outlier_count: int

    def __post_init__(self):
        # Jensen: the mean absolute error never exceeds the root mean square
        if not self.mae <= self.rmse * (1 + 1e-12) + 1e-15:
            raise MetricError(f"mae {self.mae} exceeds rmse {self.rmse}")

    def to_dict(self) -> dict:
        d = {"kind": "depth", "mae": self.mae, "rmse": self.rmse}
        d.update({f"pag_{_key(k)}": v for k, v in self.pag.items()})
        d.update(valid_count=self.valid_count, excluded_count=self.excluded_count,
                 outlier_count=self.outlier_count, lpips=None)
        return d


@dataclass
class CloudEvalReport:
    accuracy: dict
    completeness: dict
    f_score: dict
    pred_count: int
    gt_count: int

    def to_dict(self) -> dict:
        d = {"kind": "cloud", "pred_count": self.pred_count, "gt_count": self.gt_count}
        for k in self.accuracy:
            d[f"accuracy_{_key(k)}"] = self.accuracy[k]
            d[f"completeness_{_key(k)}"] = self.completeness[k]
            d[f"f_score_{_key(k)}"] = self.f_score[k]
        return d


def depth_metrics(pred, gt, thresholds=DEFAULT_THRESHOLDS, max_error: float = MAX_DEPTH_ERROR) -> DepthEvalReport:
    """MAE, RMSE and percentage of accurate grids.

    A cell counts when both maps are finite and the absolute error is at most
    ``max_error``; PAG uses strict ``<`` against each threshold over those cells.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricError(f"grid shapes differ: {pred.shape} vs {gt.shape}")
    both = np.isfinite(pred) & np.isfinite(gt)
    err = np.abs(np.where(both, pred - gt, 0.0))
    keep = both & (err <= max_error)
    m = int(keep.sum())
    if m == 0:
        raise MetricError("no valid cells to evaluate")
    e = err[keep]
    mae = float(e.sum() / m)
    # scale by the largest error so tiny residuals do not underflow when squared
    s = float(e.max())
    rmse = 0.0 if s == 0 else s * math.sqrt(float(((e / s) ** 2).sum()) / m)
    pag = {float(a): 100.0 * int((e < a).sum()) / m for a in thresholds}
    return DepthEvalReport(mae, rmse, pag, m, int(pred.size - m), int((both & ~keep).sum()))


def cloud_metrics(pred, gt, thresholds=DEFAULT_THRESHOLDS) -> CloudEvalReport:
    """Accuracy (pred -> gt), completeness (gt -> pred) and their harmonic mean, in percent."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise MetricError("point sets must be non-empty")
    d_pred, _ = cKDTree(gt).query(pred, k=1)
    d_gt, _ = cKDTree(pred).query(gt, k=1)
    acc, comp, f = {}, {}, {}
    for tau in thresholds:
        a = 100.0 * int((d_pred < tau).sum()) / len(pred)
        c = 100.0 * int((d_gt < tau).sum()) / len(gt)
        acc[float(tau)], comp[float(tau)] = a, c
        f[float(tau)] = 0.0 if a + c == 0 else 2 * a * c / (a + c)
    return CloudEvalReport(acc, comp, f, len(pred), len(gt))


def psnr(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricError(f"image shapes differ: {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def image_metrics(pred, gt) -> dict:
    """PSNR (dB, capped) and mean SSIM (11x11 Gaussian window, sigma 1.5) over channels."""
    p = psnr(pred, gt)
    s = float(ssim(torch.as_tensor(np.asarray(pred, dtype=np.float64)),
                   torch.as_tensor(np.asarray(gt, dtype=np.float64))))
    return {"kind": "image", "psnr": p, "ssim": s, "lpips": None}


def write_report(report, path) -> dict:
    d = report if isinstance(report, dict) else report.to_dict()
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    return d
