"""Radar input image and binary radar-confidence ground truth."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .scene import BBox3D, Frame, RadarPoint, project_points

RADAR_CHANNELS = ("depth", "vx", "vy", "rcs", "valid")
C_R = len(RADAR_CHANNELS)

GT_STYLES = ("ours", "fixed-patch")


@dataclass(frozen=True)
class GtConfig:
    patch_w: int = 16
    patch_h: int = 16
    tau: float = 0.4
    overlap: str = "or"
    style: str = "ours"

    def __post_init__(self):
        if self.patch_w < 1 or self.patch_h < 1:
            raise ConfigError("patch dimensions must be at least 1")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.overlap != "or":
            raise ConfigError(f"unsupported overlap rule {self.overlap!r}")
        if self.style not in GT_STYLES:
            raise ConfigError(f"gt style must be one of {GT_STYLES}")

    @classmethod
    def scaled(cls, height: int, width: int, **kwargs) -> "GtConfig":
        """Default 16 x 16 patch at 64 x 128, scaled with resolution."""
        kwargs.setdefault("patch_w", max(1, round(16 * width / 128)))
        kwargs.setdefault("patch_h", max(1, round(16 * height / 64)))
        return cls(**kwargs)


@dataclass(frozen=True)
class SelectiveRegion:
    x_lo: int
    x_hi: int
    y_lo: int
    y_hi: int
    owner: int
    kind: str  # "in-box" | "noise-patch"

    def mask(self, height: int, width: int) -> np.ndarray:
        m = np.zeros((height, width), dtype=bool)
        m[self.y_lo:self.y_hi + 1, self.x_lo:self.x_hi + 1] = True
        return m


def build_radar_image(frame: Frame) -> np.ndarray:
    """H x W x 5 grid of [depth, vx, vy, rcs, valid]; the nearer point wins a shared pixel."""
    h, w = frame.shape
    grid = np.zeros((h, w, C_R))
    attrs = frame.radar_array()
    if len(attrs) == 0:
        return grid
    proj = project_points(attrs[:, :3], frame.intrinsics)
    rows, cols = proj.rows, proj.cols
    # Best candidate (nearest, then earliest) is written last.
    order = np.lexsort((proj.index, proj.depth))[::-1]
    for k in order:
        src = attrs[proj.index[k]]
        grid[rows[k], cols[k]] = (proj.depth[k], src[3], src[4], src[5], 1.0)
    return grid


def classify_points(points: Sequence[RadarPoint], boxes: Sequence[BBox3D]) -> list[int | None]:
    """Box index for each point inside some box (smallest volume wins), else None."""
    if not points:
        return []
    pos = np.stack([p.position for p in points])
    out: list[int | None] = [None] * len(points)
    best_vol = np.full(len(points), np.inf)
    for b, box in enumerate(boxes):
        inside = box.contains(pos)
        better = inside & (box.volume < best_vol)
        best_vol[better] = box.volume
        for i in np.flatnonzero(better):
            out[i] = b
    return out


def region_for_point(col: int, row: int, index: int, box: BBox3D | None,
                     config: GtConfig, height: int, width: int) -> SelectiveRegion:
    """Selective region of a radar point projecting to pixel ``(row, col)``.

    In-box points take their box's projected rectangle; other points take a
    ``patch_w x patch_h`` window centred on their pixel. Regions are clipped to the
    image; a box rectangle with no extent after clipping collapses to the point's pixel.
    """
    if box is not None and config.style == "ours":
        x1, y1, x2, y2 = box.corners2d
        x_lo, x_hi = max(x1, 0), min(x2, width - 1)
        y_lo, y_hi = max(y1, 0), min(y2, height - 1)
        if x_hi <= x_lo or y_hi <= y_lo:
            x_lo = x_hi = col
            y_lo = y_hi = row
        return SelectiveRegion(x_lo, x_hi, y_lo, y_hi, index, "in-box")
    x_lo = max(math.ceil(col - config.patch_w / 2), 0)
    x_hi = min(math.floor(col + config.patch_w / 2), width - 1)
    y_lo = max(math.ceil(row - config.patch_h / 2), 0)
    y_hi = min(math.floor(row + config.patch_h / 2), height - 1)
    return SelectiveRegion(x_lo, x_hi, y_lo, y_hi, index, "noise-patch")


def selective_regions(frame: Frame, config: GtConfig) -> list[tuple[SelectiveRegion, float]]:
    """``(region, point depth)`` for every radar point projecting into the image."""
    h, w = frame.shape
    if not frame.radar_points:
        return []
    pos = np.stack([p.position for p in frame.radar_points])
    proj = project_points(pos, frame.intrinsics)
    assignment = classify_points(frame.radar_points, frame.boxes)
    out = []
    for k, i in enumerate(proj.index):
        b = assignment[i]
        box = frame.boxes[b] if b is not None else None
        region = region_for_point(int(proj.cols[k]), int(proj.rows[k]), int(i), box, config, h, w)
        out.append((region, float(proj.depth[k])))
    return out


def build_confidence_gt(frame: Frame, depth_acc: np.ndarray, config: GtConfig) -> np.ndarray:
    """Binary map: 1 where some point's region holds a valid depth within tau of its depth."""
    h, w = frame.shape
    depth_acc = np.asarray(depth_acc, dtype=np.float64)
    conf = np.zeros((h, w), dtype=bool)
    valid = depth_acc > 0
    for region, d in selective_regions(frame, config):
        ys = slice(region.y_lo, region.y_hi + 1)
        xs = slice(region.x_lo, region.x_hi + 1)
        conf[ys, xs] |= valid[ys, xs] & (np.abs(depth_acc[ys, xs] - d) <= config.tau)
    return conf.astype(np.float64)
