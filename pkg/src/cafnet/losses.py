"""Training losses and depth-evaluation metrics."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch

from .errors import DataError

BCE_CLAMP = 1e-7
DEFAULT_CAPS = (50.0, 70.0, 80.0)


def depth_loss(coarse: torch.Tensor, final: torch.Tensor, target: torch.Tensor, m: float = 0.5) -> torch.Tensor:
    """Masked L1 on both predictions over pixels with target > 0; the coarse term is weighted by m."""
    valid = target > 0
    n = int(valid.sum())
    if n == 0:
        raise DataError("no supervision pixels")
    tc = torch.where(valid, (target - coarse).abs(), torch.zeros_like(coarse)).sum()
    tf = torch.where(valid, (target - final).abs(), torch.zeros_like(final)).sum()
    return m * tc / n + tf / n


def luminance(image: torch.Tensor) -> torch.Tensor:
    """Mean over the channel axis (N x 3 x H x W -> N x 1 x H x W)."""
    return image.mean(dim=1, keepdim=True)


def smoothness_loss(depth: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Edge-aware smoothness with forward differences.

    Each direction is averaged over the pixels where its difference exists (last column
    for u, last row for v excluded) and the two means are summed.
    """
    lum = luminance(image)
    du = (depth[..., :, 1:] - depth[..., :, :-1]).abs()
    dv = (depth[..., 1:, :] - depth[..., :-1, :]).abs()
    iu = (lum[..., :, 1:] - lum[..., :, :-1]).abs()
    iv = (lum[..., 1:, :] - lum[..., :-1, :]).abs()
    return (du * torch.exp(-iu)).mean() + (dv * torch.exp(-iv)).mean()


def confidence_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy over the whole image; predictions clamped to [1e-7, 1 - 1e-7]."""
    p = pred.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


@dataclass
class LossBreakdown:
    l_depth: torch.Tensor | float
    l_smooth: torch.Tensor | float
    l_conf: torch.Tensor | float
    total: torch.Tensor | float

    def as_floats(self) -> dict[str, float]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        return out


def total_loss(l_depth, l_smooth, l_conf, lam: float = 1e-3) -> LossBreakdown:
    if lam < 0:
        raise ValueError("smoothness weight must be non-negative")
    total = l_depth + l_conf + lam * l_smooth
    return LossBreakdown(l_depth, l_smooth, l_conf, total)


# --------------------------------------------------------------------------- metrics

METRIC_COLUMNS = ("max_dist", "mae", "rmse", "absrel", "log10", "rmselog", "d1", "d2", "d3", "n_valid")


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    absrel: float
    log10: float
    rmselog: float
    delta1: float
    delta2: float
    delta3: float
    valid_pixel_count: int
    max_distance: float

    def row(self) -> list:
        return [self.max_distance, self.mae, self.rmse, self.absrel, self.log10, self.rmselog,
                self.delta1, self.delta2, self.delta3, self.valid_pixel_count]

    def to_csv_row(self) -> str:
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in self.row())


def compute_metrics(pred, gt, max_distance: float = 80.0) -> MetricsReport:
    """Depth metrics over pixels with 0 < gt <= max_distance."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    gt = np.asarray(gt, dtype=np.float64).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    valid = (gt > 0) & (gt <= max_distance)
    n = int(valid.sum())
    if n == 0:
        raise DataError(f"no valid ground-truth pixels within {max_distance} m")
    d, g = pred[valid], gt[valid]
    if np.any(d <= 0):
        raise ValueError("predictions must be positive")
    err = np.abs(d - g)
    log_err = np.abs(np.log10(d) - np.log10(g))
    ratio = np.maximum(d / g, g / d)
    return MetricsReport(
        mae=float(err.mean()),
        rmse=float(np.sqrt((err ** 2).mean())),
        absrel=float((err / g).mean()),
        log10=float(log_err.mean()),
        rmselog=float(np.sqrt((log_err ** 2).mean())),
        delta1=float((ratio < 1.25).mean()),
        delta2=float((ratio < 1.25 ** 2).mean()),
        delta3=float((ratio < 1.25 ** 3).mean()),
        valid_pixel_count=n,
        max_distance=float(max_distance),
    )
