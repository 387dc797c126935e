"""Local correlation volumes, matching probabilities and sub-pixel decoding.

Offsets are (row, column) displacements from a reference cell to its match
in the target grid. A volume with search width ``d`` and per-cell origin
``(u, v)`` covers offsets ``origin + k`` for ``k`` in ``[-(d-1)/2, (d-1)/2]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cylinder import CylinderImage
from .features import ExtractorSpec, FeatureMap, extract
from .gt import TargetDistribution

NEG_INF = -np.inf
LOG_FLOOR = 1e-12


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SimilarityVolume:
    scores: np.ndarray  # (rows, cols, d, d), -inf where undefined
    origins: np.ndarray  # (rows, cols, 2) integer
    ref_valid: np.ndarray  # (rows, cols)

    @property
    def d(self) -> int:
        return self.scores.shape[-1]

    @property
    def radius(self) -> int:
        return (self.d - 1) // 2


@dataclass(frozen=True, eq=False)
class ProbabilityVolume:
    probs: np.ndarray  # (rows, cols, d, d)
    origins: np.ndarray
    valid: np.ndarray

    @property
    def d(self) -> int:
        return self.probs.shape[-1]

    @property
    def radius(self) -> int:
        return (self.d - 1) // 2


@dataclass(frozen=True, eq=False)
class MatchField:
    offset: np.ndarray  # (rows, cols, 2) continuous (dy, dx)
    confidence: np.ndarray  # (rows, cols)
    valid: np.ndarray  # (rows, cols)

    @property
    def shape(self):
        return self.valid.shape

    def records(self):
        """``(ref_h, ref_w, off_h, off_w, confidence)`` for every valid cell, row-major."""
        rr, cc = np.nonzero(self.valid)
        return [(int(r), int(c), float(self.offset[r, c, 0]), float(self.offset[r, c, 1]),
                 float(self.confidence[r, c])) for r, c in zip(rr, cc)]


def _check_odd(d: int):
    if d < 1 or d % 2 == 0:
        raise ValueError(f"search width must be odd and positive, got {d}")


def correlate(ref_fm: FeatureMap, tgt_fm: FeatureMap, d: int, origins=None) -> SimilarityVolume:
    """Inner products between each reference feature and the target features around it."""
    _check_odd(d)
    if ref_fm.shape != tgt_fm.shape or ref_fm.stride != tgt_fm.stride or ref_fm.channels != tgt_fm.channels:
        raise ShapeMismatch(f"feature maps differ: {ref_fm.shape}/{ref_fm.stride} vs {tgt_fm.shape}/{tgt_fm.stride}")
    rows, cols = ref_fm.shape
    if origins is None:
        origins = np.zeros((rows, cols, 2), dtype=np.int64)
    origins = np.asarray(origins, dtype=np.int64)
    if origins.shape != (rows, cols, 2):
        raise ShapeMismatch(f"origins shape {origins.shape}, expected {(rows, cols, 2)}")
    cyclic = ref_fm.cyclic and tgt_fm.cyclic
    rad = (d - 1) // 2
    ri = np.arange(rows)[:, None]
    ci = np.arange(cols)[None, :]
    ref = ref_fm.values
    tgt_flat = tgt_fm.values.reshape(rows * cols, -1)
    tgt_valid = tgt_fm.valid.ravel()
    scores = np.full((rows, cols, d, d), NEG_INF, dtype=np.result_type(ref.dtype, tgt_flat.dtype))
    col_idx, col_ok = [], []
    for b in range(d):
        tc = ci + origins[..., 1] + (b - rad)
        if cyclic:
            col_idx.append(np.mod(tc, cols))
            col_ok.append(None)
        else:
            col_idx.append(np.clip(tc, 0, cols - 1))
            col_ok.append((tc >= 0) & (tc < cols))
    for a in range(d):
        tr = ri + origins[..., 0] + (a - rad)
        row_ok = (tr >= 0) & (tr < rows) & ref_fm.valid
        base = np.clip(tr, 0, rows - 1) * cols
        for b in range(d):
            idx = base + col_idx[b]
            ok = row_ok & tgt_valid[idx]
            if col_ok[b] is not None:
                ok &= col_ok[b]
            s = np.einsum("ijc,ijc->ij", ref, np.take(tgt_flat, idx, axis=0))
            scores[:, :, a, b] = np.where(ok, s, NEG_INF)
    return SimilarityVolume(scores, origins, ref_fm.valid.copy())


def block_origins(origins, block):
    """Per-block origins when ``origins`` is constant on every ``block`` tile, else None."""
    n, m = block
    rows, cols = origins.shape[:2]
    if rows % n or cols % m:
        return None
    tiles = origins.reshape(rows // n, n, cols // m, m, 2)
    first = tiles[:, :1, :, :1]
    if not np.array_equal(np.broadcast_to(first, tiles.shape), tiles):
        return None
    return first[:, 0, :, 0]


def correlate_blocks(ref_fm: FeatureMap, tgt_fm: FeatureMap, d: int, origins_blk, block) -> SimilarityVolume:
    """``correlate`` for origins shared by every cell of an ``n x m`` tile.

    Each tile gathers one target window and scores it with a single matrix
    product, which moves far less data than per-cell gathers. Scores equal
    those of ``correlate`` up to float rounding.
    """
    _check_odd(d)
    if ref_fm.shape != tgt_fm.shape or ref_fm.channels != tgt_fm.channels:
        raise ShapeMismatch(f"feature maps differ: {ref_fm.shape} vs {tgt_fm.shape}")
    n, m = block
    rows, cols = ref_fm.shape
    nb_r, nb_c = rows // n, cols // m
    origins_blk = np.asarray(origins_blk, dtype=np.int64)
    if rows % n or cols % m or origins_blk.shape != (nb_r, nb_c, 2):
        raise ShapeMismatch(f"{(rows, cols)} grid does not tile into {block} blocks with origins {origins_blk.shape}")
    cyclic = ref_fm.cyclic and tgt_fm.cyclic
    rad = (d - 1) // 2
    wh, ww = n + d - 1, m + d - 1
    n_blk = nb_r * nb_c

    wr = (np.arange(nb_r)[:, None] * n + origins_blk[..., 0] - rad)[..., None] + np.arange(wh)
    wc = (np.arange(nb_c)[None, :] * m + origins_blk[..., 1] - rad)[..., None] + np.arange(ww)
    r_ok = (wr >= 0) & (wr < rows)
    if cyclic:
        c_ok = np.ones(wc.shape, dtype=bool)
        wc = np.mod(wc, cols)
    else:
        c_ok = (wc >= 0) & (wc < cols)
        wc = np.clip(wc, 0, cols - 1)
    idx = (np.clip(wr, 0, rows - 1) * cols)[..., :, None] + wc[..., None, :]
    idx = idx.reshape(n_blk, wh * ww)
    win_ok = (r_ok[..., :, None] & c_ok[..., None, :]).reshape(n_blk, wh * ww) & tgt_fm.valid.ravel()[idx]
    win = np.take(tgt_fm.values.reshape(rows * cols, -1), idx, axis=0)

    def tiles(a):
        return a.reshape(nb_r, n, nb_c, m, *a.shape[2:]).swapaxes(1, 2).reshape(n_blk, n * m, *a.shape[2:])

    full = np.matmul(tiles(ref_fm.values), win.transpose(0, 2, 1))
    # window position of offset (a, b) seen from tile cell (i, j)
    i, j, a, b = np.ix_(np.arange(n), np.arange(m), np.arange(d), np.arange(d))
    sel = ((i + a) * ww + (j + b)).reshape(n * m, d * d)
    picked = np.take_along_axis(full, np.broadcast_to(sel, (n_blk, n * m, d * d)), axis=2)
    ok = win_ok[:, sel] & tiles(ref_fm.valid)[..., None]
    scores = np.where(ok, picked, NEG_INF).reshape(nb_r, nb_c, n, m, d, d).swapaxes(1, 2)
    origins = np.repeat(np.repeat(origins_blk, n, axis=0), m, axis=1)
    return SimilarityVolume(scores.reshape(rows, cols, d, d), origins, ref_fm.valid.copy())


def softmax_volume(sv: SimilarityVolume, temperature: float = 1.0) -> ProbabilityVolume:
    """Per-cell softmax over the d x d scores; -inf entries get probability 0."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    rows, cols, d, _ = sv.scores.shape
    flat = sv.scores.reshape(rows, cols, d * d)
    peak = flat.max(axis=-1, keepdims=True)
    valid = sv.ref_valid & np.isfinite(peak[..., 0])
    peak[~valid] = 0.0
    # -inf scores become exact zeros
    e = np.exp((flat - peak) * (1.0 / temperature)).astype(flat.dtype, copy=False)
    total = e.sum(axis=-1, keepdims=True)
    total[~valid] = 1.0
    probs = e / total
    probs[~valid] = 0.0
    return ProbabilityVolume(probs.reshape(rows, cols, d, d), sv.origins, valid)


def decode_subpixel(pv: ProbabilityVolume) -> MatchField:
    """Expected offset inside the 2x2 window holding the most probability.

    Window ties go to the lowest row, then lowest column.
    """
    rows, cols, d, _ = pv.probs.shape
    if d < 2:
        raise ValueError("sub-pixel decoding needs a search width of at least 2")
    p = pv.probs
    win = p[:, :, :-1, :-1] + p[:, :, :-1, 1:] + p[:, :, 1:, :-1] + p[:, :, 1:, 1:]
    flat = win.reshape(rows, cols, -1)
    best = np.argmax(flat, axis=-1)
    wa, wb = np.divmod(best, d - 1)
    q_star = np.take_along_axis(flat, best[..., None], axis=-1)[..., 0]
    ii = np.arange(rows)[:, None]
    jj = np.arange(cols)[None, :]
    p01 = p[ii, jj, wa, wb + 1]
    p10 = p[ii, jj, wa + 1, wb]
    p11 = p[ii, jj, wa + 1, wb + 1]
    valid = pv.valid & (q_star > 0)
    denom = np.where(valid, q_star, 1.0)
    rad = (d - 1) // 2
    dy = (wa - rad) + (p10 + p11) / denom
    dx = (wb - rad) + (p01 + p11) / denom
    offset = np.stack([dy, dx], axis=-1) + pv.origins
    offset = np.where(valid[..., None], offset, 0.0)
    return MatchField(offset, np.where(valid, q_star, 0.0), valid)


def match_level(ref_fm: FeatureMap, tgt_fm: FeatureMap, d: int, origins=None, temperature: float = 1.0):
    pv = softmax_volume(correlate(ref_fm, tgt_fm, d, origins), temperature)
    return decode_subpixel(pv), pv


def round_half_away(x):
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


def upsample_origins(coarse: MatchField, stride, shape) -> np.ndarray:
    """Full-resolution integer origins from a strided match field."""
    n, m = stride
    scaled = coarse.offset * np.array([n, m], dtype=np.float64)
    scaled = np.where(coarse.valid[..., None], scaled, 0.0)
    full = np.repeat(np.repeat(scaled, n, axis=0), m, axis=1)[: shape[0], : shape[1]]
    return round_half_away(full)


def cascade_match(ref_img: CylinderImage, tgt_img: CylinderImage, coarse: ExtractorSpec, refine: ExtractorSpec,
                  d_coarse: int = 11, d_refine: int = 5, temperature: float = 1.0,
                  return_stages: bool = False, features=None, coarse_temperature: float = None):
    """Coarse strided search seeding a full-resolution refinement.

    The result is indexed by reference image cell and expressed in image
    cells. Cells invalid at the coarse level are refined around a zero
    origin. ``coarse_temperature`` overrides ``temperature`` for the first
    stage. ``features`` may carry precomputed
    ``((coarse_ref, refine_ref), (coarse_tgt, refine_tgt))`` maps.
    """
    if ref_img.config != tgt_img.config:
        raise ShapeMismatch("reference and target images use different cylinder configs")
    if tuple(refine.stride) != (1, 1):
        raise ValueError("refinement stage must run at full resolution")
    if features is None:
        features = ((extract(ref_img, coarse), extract(ref_img, refine)),
                    (extract(tgt_img, coarse), extract(tgt_img, refine)))
    (c_ref, f_ref), (c_tgt, f_tgt) = features
    t_coarse = temperature if coarse_temperature is None else coarse_temperature
    coarse_mf, _ = match_level(c_ref, c_tgt, d_coarse, None, t_coarse)
    origins = upsample_origins(coarse_mf, coarse.stride, ref_img.shape)

    blk = block_origins(origins, coarse.stride)
    if blk is None:
        fine_mf, fine_pv = match_level(f_ref, f_tgt, d_refine, origins, temperature)
    else:
        fine_pv = softmax_volume(correlate_blocks(f_ref, f_tgt, d_refine, blk, coarse.stride), temperature)
        fine_mf = decode_subpixel(fine_pv)
    if return_stages:
        return fine_mf, coarse_mf, fine_pv
    return fine_mf


def embed_distribution(dist: TargetDistribution, origin, d: int) -> np.ndarray:
    """Place a target distribution given in offset coordinates into a d x d grid.

    Mass falling outside the search window is dropped.
    """
    rad = (d - 1) // 2
    grid = np.zeros((d, d))
    for (y, x), p in zip(dist.window, dist.probs):
        a = y - origin[0] + rad
        b = x - origin[1] + rad
        if 0 <= a < d and 0 <= b < d:
            grid[a, b] += p
    return grid


def subpixel_loss(pv: ProbabilityVolume, gts) -> float:
    """Mean cross entropy between target distributions and predicted probabilities.

    ``gts`` holds ``((row, col), TargetDistribution)`` pairs whose window is
    in offset coordinates relative to the reference cell.
    """
    if len(gts) == 0:
        raise ValueError("no supervised cells")
    total = 0.0
    for (r, c), dist in gts:
        q = pv.probs[r, c]
        target = embed_distribution(dist, pv.origins[r, c], pv.d)
        outside = 1.0 - target.sum()
        total += -np.sum(target * np.log(np.maximum(q, LOG_FLOOR)))
        if outside > 1e-15:
            total += -outside * np.log(LOG_FLOOR)
    return float(total / len(gts))


def loss_grad_logits(scores, target, temperature: float = 1.0) -> np.ndarray:
    """Gradient of the cell cross entropy with respect to the pre-softmax scores."""
    s = np.asarray(scores, dtype=np.float64) / temperature
    e = np.exp(s - s.max())
    return (e / e.sum() - np.asarray(target, dtype=np.float64)) / temperature
