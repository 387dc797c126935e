"""Per-cell correspondence supervision derived from a frame-level transform."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cylinder import CylinderImage, project_points, reproject_grid
from .geometry import RigidTransform, apply, compose, invert

MASK_THRESHOLD = 0.1


class ConfigMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Correspondence:
    ref_cell: tuple  # integer (h, w)
    tgt_coord: tuple  # continuous (h, w)
    virtual_point_ref: np.ndarray
    transformed_point: np.ndarray
    range_error: float


@dataclass(frozen=True)
class TargetDistribution:
    window: tuple  # four integer (x, y) cells, row-major over the 2x2 block
    probs: tuple

    def expectation(self):
        w = np.asarray(self.window, dtype=np.float64)
        p = np.asarray(self.probs)
        return tuple(p @ w)


def bilinear_distribution(coord) -> TargetDistribution:
    """Spread a continuous coordinate over the 2x2 block of cells around it."""
    x, y = float(coord[0]), float(coord[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValueError("target coordinate must be finite")
    x0, y0 = math.floor(x), math.floor(y)
    fx, fy = x - x0, y - y0
    window = ((x0, y0), (x0, y0 + 1), (x0 + 1, y0), (x0 + 1, y0 + 1))
    probs = ((1 - fx) * (1 - fy), (1 - fx) * fy, fx * (1 - fy), fx * fy)
    return TargetDistribution(window, probs)


def _wrap_cols(cols, width, cyclic):
    if cyclic:
        return np.mod(cols, width), np.ones(np.shape(cols), dtype=bool)
    return np.clip(cols, 0, width - 1), (cols >= 0) & (cols < width)


def lookup_range_nearest(img: CylinderImage, h, w):
    """Range of the nearest occupied cell in the 2x2 block around ``(h, w)``; inf if none."""
    cfg = img.config
    h = np.asarray(h, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    h0 = np.floor(h).astype(np.int64)
    w0 = np.floor(w).astype(np.int64)
    best_d = np.full(h.shape, np.inf)
    best_r = np.full(h.shape, np.inf)
    # corners in row-major order so equal distances keep the lowest row/col
    for dh in (0, 1):
        for dw in (0, 1):
            r = h0 + dh
            c = w0 + dw
            cc, col_ok = _wrap_cols(c, cfg.width, cfg.cyclic)
            ok = (r >= 0) & (r < cfg.height) & col_ok
            rc = np.clip(r, 0, cfg.height - 1)
            occ = ok & img.occupied[rc, cc]
            dist = (h - r) ** 2 + (w - c) ** 2
            better = occ & (dist < best_d)
            best_d = np.where(better, dist, best_d)
            best_r = np.where(better, img.range[rc, cc], best_r)
    return best_r


def generate_correspondences(ref: CylinderImage, tgt: CylinderImage, t_gt: RigidTransform):
    """Virtual-point correspondences for every occupied reference cell.

    ``t_gt`` maps reference-frame coordinates into the target frame.
    Cells whose transformed point leaves the target image are skipped.
    """
    if ref.config != tgt.config:
        raise ConfigMismatch("reference and target images use different cylinder configs")
    cfg = ref.config
    rows, cols = np.nonzero(ref.occupied)
    virt = reproject_grid(rows, cols, ref.range[rows, cols], cfg)
    moved = apply(t_gt, virt) if len(rows) else virt
    h, w, inside = project_points(moved, cfg)
    keep = np.nonzero(inside)[0]
    err = lookup_range_nearest(tgt, h[keep], w[keep]) - np.linalg.norm(moved[keep], axis=1)
    return [Correspondence((int(rows[k]), int(cols[k])), (float(h[k]), float(w[k])), virt[k], moved[k], float(e))
            for k, e in zip(keep, err)]


def mask_inaccurate(cands, threshold: float = MASK_THRESHOLD):
    """Keep correspondences whose target range discrepancy is below ``threshold`` in magnitude."""
    return [c for c in cands if abs(c.range_error) < threshold]


def offset_distribution(corr: Correspondence) -> TargetDistribution:
    """Bilinear target distribution in offset coordinates relative to the reference cell."""
    return bilinear_distribution((corr.tgt_coord[0] - corr.ref_cell[0], corr.tgt_coord[1] - corr.ref_cell[1]))


def wrapped_offset(corr: Correspondence, width: int, cyclic: bool):
    dh = corr.tgt_coord[0] - corr.ref_cell[0]
    dw = corr.tgt_coord[1] - corr.ref_cell[1]
    if cyclic:
        dw = (dw + width / 2.0) % width - width / 2.0
    return dh, dw


def make_training_pairs(scans, poses):
    """Three training pairs from three consecutive scans.

    Returns ``[(scan_a, scan_b, rel)]`` for (t-1, t), (t, t+1), (t-1, t+1)
    where ``rel = invert(pose_a) @ pose_b`` is the pose of scan b in the
    frame of scan a. Supervision via ``generate_correspondences(a, b, ...)``
    needs its inverse, which maps frame-a points into frame b.
    """
    if len(scans) != 3 or len(poses) != 3:
        raise ValueError("need exactly three scans and three poses")
    pairs = []
    for a, b in ((0, 1), (1, 2), (0, 2)):
        pairs.append((scans[a], scans[b], compose(invert(poses[a]), poses[b])))
    return pairs
