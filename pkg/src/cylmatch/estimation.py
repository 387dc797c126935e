"""From a match field to a relative pose, and frame-to-frame odometry."""

from __future__ import annotations

import hashlib
import logging
import threading
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cylinder import CylinderConfig, CylinderImage, PointCloud, crop_center, encode, reproject_grid
from .features import ExtractorSpec, FeatureMap, coarse_spec, extract, refine_spec
from .geometry import DegenerateConfiguration, RigidTransform, apply, compose, invert, kabsch_batch, kabsch_solve
from .matching import MatchField, cascade_match

log = logging.getLogger(__name__)


class InsufficientCorrespondences(ValueError):
    pass


@dataclass(frozen=True)
class Correspondence3D:
    p_ref: np.ndarray
    p_tgt: np.ndarray
    confidence: float
    ref_cell: tuple


@dataclass(frozen=True)
class EstimatorConfig:
    nms_radius: int = 1
    top_n: int = 256
    ransac_iters: int = 200
    inlier_threshold: float = 0.1
    min_inliers: int = 10
    min_confidence: float = 0.5
    weighted_refit: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.nms_radius < 0:
            raise ValueError("nms_radius must be nonnegative")
        if min(self.top_n, self.ransac_iters, self.min_inliers) < 1:
            raise ValueError("counts must be positive")
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be positive")


@dataclass(frozen=True)
class PipelineConfig:
    """Everything needed to turn two scans into a relative pose.

    ``crop`` is the centred ``(rows, cols)`` window fed to matching; it is
    skipped when the encoded image is smaller, and ``None`` disables it.
    ``temperature`` applies to the refine volume and ``coarse_temperature``
    to the coarse one (``None`` reuses ``temperature``). The estimator keeps
    more candidates than the standalone default because dense fields
    saturate confidence and a small top set clusters in a few rows.
    """

    cylinder: CylinderConfig = field(default_factory=CylinderConfig.kitti)
    crop: tuple = (64, 1792)
    coarse: ExtractorSpec = field(default_factory=coarse_spec)
    refine: ExtractorSpec = field(default_factory=refine_spec)
    d_coarse: int = 11
    d_refine: int = 5
    temperature: float = 0.1
    coarse_temperature: float = 0.05
    estimator: EstimatorConfig = field(default_factory=lambda: EstimatorConfig(top_n=1024))


@dataclass(frozen=True)
class PoseResult:
    """``transform`` is the pose of the target scan in the reference scan's frame."""

    transform: RigidTransform
    inlier_count: int
    correspondence_count: int
    used_motion_model: bool


@dataclass
class LiftStats:
    lifted: int = 0
    masked: int = 0
    sparse_target: int = 0
    out_of_image: int = 0


def _lift_arrays(mf: MatchField, ref_img: CylinderImage, tgt_img: CylinderImage, moving_mask=None,
                 stats: LiftStats = None, min_confidence: float = None):
    """Array form of ``lift_to_3d``: ``(rows, cols, p_ref, p_tgt, confidence)``."""
    stats = stats if stats is not None else LiftStats()
    cfg = tgt_img.config
    valid = mf.valid & ref_img.occupied
    if moving_mask is not None:
        moving = np.asarray(moving_mask, dtype=bool)
        stats.masked = int(np.count_nonzero(valid & moving))
        valid &= ~moving
    if min_confidence is not None:
        valid &= mf.confidence >= min_confidence
    rows, cols = np.nonzero(valid)
    th = rows + mf.offset[rows, cols, 0]
    tw = cols + mf.offset[rows, cols, 1]
    if cfg.cyclic:
        tw = np.mod(tw + 0.5, cfg.width) - 0.5
    h0 = np.floor(th).astype(np.int64)
    w0 = np.floor(tw).astype(np.int64)
    fh, fw = th - h0, tw - w0
    acc_r = np.zeros(rows.size)
    acc_w = np.zeros(rows.size)
    n_occ = np.zeros(rows.size, dtype=np.int64)
    for dh in (0, 1):
        for dw in (0, 1):
            r = h0 + dh
            c = w0 + dw
            if cfg.cyclic:
                c_ok = np.ones(rows.size, dtype=bool)
                c = np.mod(c, cfg.width)
            else:
                c_ok = (c >= 0) & (c < cfg.width)
            ok = (r >= 0) & (r < cfg.height) & c_ok
            rc = np.clip(r, 0, cfg.height - 1)
            cc = np.clip(c, 0, cfg.width - 1)
            occ = ok & tgt_img.occupied[rc, cc]
            wgt = (fh if dh else 1.0 - fh) * (fw if dw else 1.0 - fw)
            acc_r += np.where(occ, wgt * tgt_img.range[rc, cc], 0.0)
            acc_w += np.where(occ, wgt, 0.0)
            n_occ += occ
    inside = (th >= -0.5) & (th <= cfg.height - 0.5) & (cfg.cyclic | ((tw >= -0.5) & (tw <= cfg.width - 0.5)))
    keep = inside & (n_occ >= 2) & (acc_w > 0)
    stats.out_of_image = int(np.count_nonzero(~inside))
    stats.sparse_target = int(np.count_nonzero(inside & ~keep))
    stats.lifted = int(np.count_nonzero(keep))

    rows, cols, th, tw = rows[keep], cols[keep], th[keep], tw[keep]
    p_ref = reproject_grid(rows, cols, ref_img.range[rows, cols], ref_img.config)
    p_tgt = reproject_grid(th, tw, acc_r[keep] / acc_w[keep], cfg)
    return rows, cols, p_ref.reshape(-1, 3), p_tgt.reshape(-1, 3), mf.confidence[rows, cols]


def _to_records(rows, cols, p_ref, p_tgt, conf, idx=None):
    idx = range(len(rows)) if idx is None else idx
    return [Correspondence3D(p_ref[k], p_tgt[k], float(conf[k]), (int(rows[k]), int(cols[k]))) for k in idx]


def lift_to_3d(mf: MatchField, ref_img: CylinderImage, tgt_img: CylinderImage, moving_mask=None,
               stats: LiftStats = None):
    """3D point pairs for every valid match.

    The reference side is the virtual point at the cell centre. The target
    side is reprojected at the predicted continuous coordinate with the range
    interpolated bilinearly over the occupied cells of its 2x2 block; matches
    with fewer than two occupied corners are skipped.
    """
    return _to_records(*_lift_arrays(mf, ref_img, tgt_img, moving_mask, stats))


def _nms_order(rows, cols, conf, radius: int, top_n: int, width: int = None):
    """Indices kept by greedy suppression, best first."""
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    if len(rows) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((cols, rows, -np.asarray(conf, dtype=np.float64)))
    r0 = int(rows.min()) - radius
    c0 = int(cols.min()) - radius
    n_cols = width if width is not None else int(cols.max()) - c0 + radius + 1
    taken = np.zeros((int(rows.max()) - r0 + radius + 1, n_cols), dtype=bool)
    span = np.arange(-radius, radius + 1)
    kept = []
    for i in order:
        r = rows[i] - r0
        c = cols[i] % width if width is not None else cols[i] - c0
        if taken[r, c]:
            continue
        kept.append(i)
        if len(kept) == top_n:
            break
        cc = (c + span) % width if width is not None else c + span
        taken[np.ix_(r + span, cc)] = True
    return np.asarray(kept, dtype=np.int64)


def nms_select(cands, radius: int, top_n: int, width: int = None):
    """Greedy suppression on the image grid, best confidence first.

    Distance is Chebyshev in cells; columns wrap when ``width`` is given.
    Ties in confidence go to the lower row, then column. Returns at most
    ``top_n`` survivors sorted by descending confidence.
    """
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    if not cands:
        return []
    cells = np.array([c.ref_cell for c in cands], dtype=np.int64)
    conf = np.array([c.confidence for c in cands])
    keep = _nms_order(cells[:, 0], cells[:, 1], conf, radius, top_n, width)
    return [cands[k] for k in keep]


def _residuals(t: RigidTransform, p, q):
    return np.linalg.norm(q - apply(t, p), axis=1)


def ransac_solve(cands, cfg: EstimatorConfig):
    """Robust rigid fit ``p_tgt ~ T p_ref``; returns ``(T, inlier_indices)``.

    Three-point hypotheses are drawn from a generator seeded by
    ``cfg.rng_seed``; the best consensus set is refit (confidence-weighted by
    default), violators of the threshold after refitting are dropped and the
    set refit once more.
    """
    n = len(cands)
    if n < 3:
        raise InsufficientCorrespondences(f"need at least 3 correspondences, got {n}")
    p = np.array([c.p_ref for c in cands])
    q = np.array([c.p_tgt for c in cands])
    conf = np.array([c.confidence for c in cands])
    rng = np.random.default_rng(cfg.rng_seed)
    thr = cfg.inlier_threshold

    samples = np.array([rng.choice(n, size=3, replace=False) for _ in range(cfg.ransac_iters)])
    rot, trans, ok = kabsch_batch(p[samples], q[samples])
    if not ok.any():
        raise DegenerateConfiguration("every RANSAC sample was degenerate")
    pred = np.einsum("kij,nj->kni", rot, p) + trans[:, None, :]
    hits = np.linalg.norm(q[None] - pred, axis=2) <= thr
    counts = np.where(ok, hits.sum(axis=1), -1)
    # first hypothesis with the largest consensus
    best_mask = hits[int(np.argmax(counts))]

    weights = conf if cfg.weighted_refit else None

    def refit(mask):
        idx = np.nonzero(mask)[0]
        return kabsch_solve(p[idx], q[idx], None if weights is None else weights[idx])

    t = refit(best_mask)
    mask = best_mask & (_residuals(t, p, q) <= thr)
    if not np.array_equal(mask, best_mask):
        if mask.sum() < 3:
            raise DegenerateConfiguration("refit left fewer than 3 inliers")
        t = refit(mask)
        mask &= _residuals(t, p, q) <= thr
    return t, np.nonzero(mask)[0]


def predict_motion(history) -> RigidTransform:
    """Constant-velocity guess: repeat the most recent relative motion."""
    if not history:
        return RigidTransform.identity()
    return history[-1]


def point_mask_to_cells(img: CylinderImage, point_mask) -> np.ndarray:
    """Per-cell boolean from a per-point mask, via each cell's source point."""
    point_mask = np.asarray(point_mask, dtype=bool)
    src = img.source_index
    out = np.zeros(img.shape, dtype=bool)
    occ = src >= 0
    out[occ] = point_mask[src[occ]]
    return out


@dataclass
class PairDiagnostics:
    match_field: MatchField = None
    lift: LiftStats = None
    selected: int = 0


@dataclass(frozen=True, eq=False)
class PreparedScan:
    """A scan encoded and cropped for matching, with both feature maps."""

    image: CylinderImage
    coarse: FeatureMap
    refine: FeatureMap


def prepare_from_image(img: CylinderImage, cfg: PipelineConfig) -> PreparedScan:
    return PreparedScan(img, extract(img, cfg.coarse), extract(img, cfg.refine))


class _ScanCache:
    """Small LRU of prepared scans keyed by cloud content and pipeline settings."""

    def __init__(self, size: int = 4):
        self.size = size
        self._items = OrderedDict()
        self._lock = threading.Lock()

    @staticmethod
    def key(cloud: PointCloud, cfg: PipelineConfig):
        settings = (cfg.cylinder, cfg.crop, cfg.coarse, cfg.refine)
        try:
            hash(settings)
        except TypeError:
            return None  # conv specs hold arrays
        digest = hashlib.blake2b(np.ascontiguousarray(cloud.points).tobytes(), digest_size=20)
        if cloud.reflectivity is not None:
            digest.update(np.ascontiguousarray(cloud.reflectivity).tobytes())
        return digest.digest(), settings

    def get(self, cloud: PointCloud, cfg: PipelineConfig) -> PreparedScan:
        key = self.key(cloud, cfg)
        if key is not None:
            with self._lock:
                if key in self._items:
                    self._items.move_to_end(key)
                    return self._items[key]
        prepared = prepare_from_image(prepare_image(cloud, cfg), cfg)
        if key is not None:
            with self._lock:
                self._items[key] = prepared
                while len(self._items) > self.size:
                    self._items.popitem(last=False)
        return prepared


_cache = _ScanCache()


def prepare_scan(cloud: PointCloud, cfg: PipelineConfig) -> PreparedScan:
    """Encode and extract features for a scan, reusing recent identical work."""
    return _cache.get(cloud, cfg)


def _estimate(ref: PreparedScan, tgt: PreparedScan, cfg: PipelineConfig, history=(), moving_mask=None,
              diagnostics: PairDiagnostics = None) -> PoseResult:
    est = cfg.estimator
    ref_img, tgt_img = ref.image, tgt.image
    mf = cascade_match(ref_img, tgt_img, cfg.coarse, cfg.refine, cfg.d_coarse, cfg.d_refine, cfg.temperature,
                       features=((ref.coarse, ref.refine), (tgt.coarse, tgt.refine)),
                       coarse_temperature=cfg.coarse_temperature)
    stats = LiftStats()
    lifted = _lift_arrays(mf, ref_img, tgt_img, moving_mask, stats, est.min_confidence)
    rows, cols, _, _, conf = lifted
    width = ref_img.config.width if ref_img.config.cyclic else None
    selected = _to_records(*lifted, _nms_order(rows, cols, conf, est.nms_radius, est.top_n, width))
    if diagnostics is not None:
        diagnostics.match_field, diagnostics.lift, diagnostics.selected = mf, stats, len(selected)

    inliers = 0
    t = None
    try:
        t_map, idx = ransac_solve(selected, est)
        inliers = len(idx)
        t = invert(t_map)
    except (InsufficientCorrespondences, DegenerateConfiguration) as exc:
        log.debug("pose solve failed: %s", exc)
    if inliers < est.min_inliers:
        return PoseResult(predict_motion(list(history)), inliers, len(selected), True)
    return PoseResult(t, inliers, len(selected), False)


def estimate_from_images(ref_img: CylinderImage, tgt_img: CylinderImage, cfg: PipelineConfig,
                         history=(), moving_mask=None, diagnostics: PairDiagnostics = None) -> PoseResult:
    """``estimate_relative_pose`` on images that are already encoded and cropped."""
    return _estimate(prepare_from_image(ref_img, cfg), prepare_from_image(tgt_img, cfg), cfg, history,
                     moving_mask, diagnostics)


def prepare_image(cloud: PointCloud, cfg: PipelineConfig) -> CylinderImage:
    """Encode a scan and apply the configured centre crop."""
    img = encode(cloud, cfg.cylinder)
    if cfg.crop is not None:
        rows, cols = cfg.crop
        if rows <= img.shape[0] and cols <= img.shape[1] and (rows, cols) != img.shape:
            img = crop_center(img, rows, cols)
    return img


def estimate_relative_pose(ref: PointCloud, tgt: PointCloud, cfg: PipelineConfig = None,
                           history=(), ref_moving=None, diagnostics: PairDiagnostics = None) -> PoseResult:
    """Relative pose between two scans.

    The returned transform is the target sensor pose expressed in the
    reference frame, so ``pose_tgt = pose_ref @ result.transform``.
    ``ref_moving`` is an optional per-point mask of the reference scan
    whose cells are excluded from matching.
    """
    cfg = cfg or PipelineConfig()
    ref_p = prepare_scan(ref, cfg)
    tgt_p = prepare_scan(tgt, cfg)
    mask = None if ref_moving is None else point_mask_to_cells(ref_p.image, ref_moving)
    return _estimate(ref_p, tgt_p, cfg, history, mask, diagnostics)


def estimate_pairs(pairs, cfg: PipelineConfig = None, workers: int = 1):
    """Independent pair registrations, optionally on a thread pool; order is preserved."""
    cfg = cfg or PipelineConfig()
    if workers <= 1:
        return [estimate_relative_pose(a, b, cfg) for a, b in pairs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda ab: estimate_relative_pose(ab[0], ab[1], cfg), pairs))


def run_odometry(scans, cfg: PipelineConfig = None, moving_masks=None, on_frame=None):
    """Chain frame-to-frame estimates into absolute poses starting at identity.

    Returns ``(poses, results)``; ``on_frame(k, result)`` is called after
    each pair if given.
    """
    cfg = cfg or PipelineConfig()
    scans = list(scans)
    if not scans:
        raise ValueError("need at least one scan")
    poses = [RigidTransform.identity()]
    results = []
    history = []
    prev = prepare_from_image(prepare_image(scans[0], cfg), cfg)
    for k in range(1, len(scans)):
        cur = prepare_from_image(prepare_image(scans[k], cfg), cfg)
        mask = None
        if moving_masks is not None and moving_masks[k - 1] is not None:
            mask = point_mask_to_cells(prev.image, moving_masks[k - 1])
        res = _estimate(prev, cur, cfg, history, mask)
        results.append(res)
        history.append(res.transform)
        poses.append(compose(poses[-1], res.transform))
        if on_frame is not None:
            on_frame(k, res)
        prev = cur
    return poses, results
