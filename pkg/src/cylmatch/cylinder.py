"""Cylinder (range image) encoding of single-viewpoint LiDAR scans.

Grid convention: row ``h`` sits at elevation ``phi_min + h * dphi`` and
column ``w`` at azimuth ``theta_min + w * dtheta``. Cell centres are at
integer coordinates, so a continuous coordinate rounds to its cell.
With ``theta_min = -pi`` the forward direction (+x) lands mid-image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

NO_SOURCE = -1
TWO_PI = 2.0 * math.pi


class SizeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class CylinderConfig:
    dtheta: float
    dphi: float
    phi_min: float
    height: int
    width: int
    theta_min: float = -math.pi
    reflectivity_scale: float = 1.0

    def __post_init__(self):
        if not (self.dtheta > 0 and self.dphi > 0):
            raise ValueError("angular resolutions must be positive")
        if self.height < 1 or self.width < 1:
            raise ValueError("image must have at least one row and column")
        if self.reflectivity_scale <= 0:
            raise ValueError("reflectivity_scale must be positive")

    @classmethod
    def from_fov(cls, dtheta: float, dphi: float, vfov: float, phi_min: float,
                 hfov: float = TWO_PI, **kw) -> CylinderConfig:
        """Size the grid so both FOV end points get a cell (``floor(fov/res) + 1``)."""
        height = int(math.floor(vfov / dphi + 1e-9)) + 1
        width = int(math.floor(hfov / dtheta + 1e-9)) + 1
        return cls(dtheta=dtheta, dphi=dphi, phi_min=phi_min, height=height, width=width, **kw)

    @classmethod
    def kitti(cls) -> CylinderConfig:
        """HDL-64E layout: 0.2 deg x 0.4 deg over 360 x 26.9 deg, 68 x 1801 cells."""
        return cls.from_fov(math.radians(0.2), math.radians(0.4), math.radians(26.9), math.radians(-24.9))

    @property
    def period(self) -> float:
        """Columns per full azimuth revolution."""
        return TWO_PI / self.dtheta

    @property
    def cyclic(self) -> bool:
        """True when the columns tile exactly one revolution, so column W wraps to 0."""
        return abs(self.width - self.period) < 1e-6


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    reflectivity: np.ndarray = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if self.reflectivity is None:
            refl = np.zeros(pts.shape[0])
        else:
            refl = np.array(self.reflectivity, dtype=np.float64).reshape(-1)
        if refl.shape[0] != pts.shape[0]:
            raise ValueError(f"{pts.shape[0]} points but {refl.shape[0]} reflectivity values")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(refl))):
            raise ValueError("point cloud contains non-finite values")
        if pts.shape[0] and np.min(np.linalg.norm(pts, axis=1)) < 1e-6:
            raise ValueError("point cloud contains points at the sensor origin")
        pts.flags.writeable = False
        refl.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "reflectivity", refl)

    def __len__(self):
        return self.points.shape[0]


def round_half_up(x):
    """Nearest integer with ties toward +inf."""
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


def project_points(points, cfg: CylinderConfig):
    """Continuous grid coordinates of an (N, 3) array.

    Returns ``(h, w, inside)``; ``inside`` is False for points whose rounded
    cell lies outside the image.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    theta = np.arctan2(y, x)
    phi = np.arctan2(z, np.hypot(x, y))
    h = (phi - cfg.phi_min) / cfg.dphi
    w = (theta - cfg.theta_min) / cfg.dtheta
    period = cfg.period
    if cfg.cyclic:
        lo = -0.5
    else:
        lo = (cfg.width - 1) / 2.0 - period / 2.0
    w = lo + np.mod(w - lo, period)
    inside = (h >= -0.5) & (h < cfg.height - 0.5) & (w >= -0.5) & (w < cfg.width - 0.5)
    return h, w, inside


def project_point(p, cfg: CylinderConfig):
    """Continuous ``(h, w)`` of a single point, or None when it falls outside the image."""
    p = np.asarray(p, dtype=np.float64).reshape(3)
    if np.linalg.norm(p) == 0:
        raise ValueError("cannot project the sensor origin")
    h, w, inside = project_points(p[None, :], cfg)
    if not inside[0]:
        return None
    return float(h[0]), float(w[0])


def reproject_grid(h, w, rng, cfg: CylinderConfig) -> np.ndarray:
    """3D point at continuous grid coordinate ``(h, w)`` and range ``rng``.

    Broadcasts over array inputs; the trailing axis of the result is xyz.
    """
    phi = cfg.phi_min + np.asarray(h, dtype=np.float64) * cfg.dphi
    theta = cfg.theta_min + np.asarray(w, dtype=np.float64) * cfg.dtheta
    r = np.asarray(rng, dtype=np.float64)
    cp = np.cos(phi)
    return np.stack([r * cp * np.cos(theta), r * cp * np.sin(theta), r * np.sin(phi)], axis=-1)


@dataclass(frozen=True, eq=False)
class CylinderImage:
    config: CylinderConfig
    range: np.ndarray
    reflectivity: np.ndarray
    occupied: np.ndarray
    source_index: np.ndarray
    dropped: int = 0
    cell_points: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("range", "reflectivity", "occupied", "source_index", "cell_points"):
            arr = getattr(self, name)
            if arr is not None:
                arr.flags.writeable = False

    @property
    def shape(self):
        return self.range.shape

    def equals(self, other: CylinderImage) -> bool:
        return (self.config == other.config
                and np.array_equal(self.range, other.range)
                and np.array_equal(self.reflectivity, other.reflectivity)
                and np.array_equal(self.occupied, other.occupied)
                and np.array_equal(self.source_index, other.source_index))


def empty_image(cfg: CylinderConfig) -> CylinderImage:
    shape = (cfg.height, cfg.width)
    return CylinderImage(cfg, np.zeros(shape), np.zeros(shape), np.zeros(shape, dtype=bool),
                         np.full(shape, NO_SOURCE, dtype=np.int64), 0, np.zeros(shape + (3,)))


def encode(cloud: PointCloud, cfg: CylinderConfig) -> CylinderImage:
    """Rasterise a scan, keeping the closest point in each cell.

    Equal ranges are resolved toward the lower point index, so the result
    does not depend on input order. ``dropped`` counts out-of-image points.
    """
    pts = cloud.points
    if len(cloud) == 0:
        return empty_image(cfg)
    h, w, inside = project_points(pts, cfg)
    idx = np.nonzero(inside)[0]
    dropped = int(pts.shape[0] - idx.size)
    rows = round_half_up(h[idx])
    cols = np.mod(round_half_up(w[idx]), cfg.width)
    rng = np.sqrt(np.sum(pts[idx] ** 2, axis=1))
    cell = rows * cfg.width + cols

    order = np.lexsort((idx, rng, cell))
    _, first = np.unique(cell[order], return_index=True)
    keep = order[first]

    shape = (cfg.height, cfg.width)
    range_img = np.zeros(shape)
    refl_img = np.zeros(shape)
    occ = np.zeros(shape, dtype=bool)
    src = np.full(shape, NO_SOURCE, dtype=np.int64)
    cell_pts = np.zeros(shape + (3,))
    r_k, c_k = rows[keep], cols[keep]
    range_img[r_k, c_k] = rng[keep]
    refl_img[r_k, c_k] = np.clip(cloud.reflectivity[idx[keep]] / cfg.reflectivity_scale, 0.0, 1.0)
    occ[r_k, c_k] = True
    src[r_k, c_k] = idx[keep]
    cell_pts[r_k, c_k] = pts[idx[keep]]
    return CylinderImage(cfg, range_img, refl_img, occ, src, dropped, cell_pts)


def crop_center(img: CylinderImage, new_h: int, new_w: int) -> CylinderImage:
    """Centred crop; an odd surplus loses its extra row/column on the high-index side."""
    cfg = img.config
    if new_h > cfg.height or new_w > cfg.width or new_h < 1 or new_w < 1:
        raise SizeMismatch(f"cannot crop {cfg.height}x{cfg.width} to {new_h}x{new_w}")
    top = (cfg.height - new_h) // 2
    left = (cfg.width - new_w) // 2
    new_cfg = replace(cfg, height=new_h, width=new_w,
                      phi_min=cfg.phi_min + top * cfg.dphi,
                      theta_min=cfg.theta_min + left * cfg.dtheta)
    if new_h == cfg.height and new_w == cfg.width:
        new_cfg = cfg
    sl = (slice(top, top + new_h), slice(left, left + new_w))
    src = img.source_index[sl]
    cell_pts = None if img.cell_points is None else img.cell_points[sl].copy()
    return CylinderImage(new_cfg, img.range[sl].copy(), img.reflectivity[sl].copy(),
                         img.occupied[sl].copy(), src.copy(), img.dropped, cell_pts)
