"""Trajectory and registration accuracy metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import DegenerateConfiguration, RigidTransform, apply, compose, invert, kabsch_solve, \
    rotation_geodesic_error

SEGMENT_LENGTHS = tuple(range(100, 801, 100))


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Absolute sensor poses (world from sensor), optionally timestamped."""

    poses: tuple
    timestamps: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        if self.timestamps is not None:
            ts = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
            if ts.shape[0] != len(self.poses):
                raise LengthMismatch(f"{ts.shape[0]} timestamps for {len(self.poses)} poses")
            object.__setattr__(self, "timestamps", ts)

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    @property
    def frame_distances(self) -> np.ndarray:
        """Cumulative path length at every frame, starting at zero."""
        pos = self.positions
        if len(pos) == 0:
            return np.zeros(0)
        steps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])


@dataclass
class SegmentErrorReport:
    """``t_rel`` in percent and ``r_rel`` in degrees per 100 m, averaged over all segments.

    ``per_length`` maps each segment length to ``(t_rel, r_rel, count)``.
    """

    t_rel: float = 0.0
    r_rel: float = 0.0
    segments: int = 0
    per_length: dict = field(default_factory=dict)
    insufficient_length: bool = False

    def lines(self):
        out = [f"t_rel={self.t_rel:.6f}", f"r_rel={self.r_rel:.6f}", f"segments={self.segments}",
               f"insufficient_length={int(self.insufficient_length)}"]
        for length, (t, r, n) in sorted(self.per_length.items()):
            out.append(f"t_rel_{length}={t:.6f}")
            out.append(f"r_rel_{length}={r:.6f}")
            out.append(f"segments_{length}={n}")
        return out

    def table(self) -> str:
        rows = ["  length   t_rel(%)   r_rel(deg/100m)   segments"]
        for length, (t, r, n) in sorted(self.per_length.items()):
            rows.append(f"  {length:6d}   {t:8.4f}   {r:15.4f}   {n:8d}")
        rows.append(f"  {'all':>6}   {self.t_rel:8.4f}   {self.r_rel:15.4f}   {self.segments:8d}")
        return "\n".join(rows)


@dataclass
class AteRpeReport:
    ate_mean: float = 0.0
    ate_max: float = 0.0
    rpe_mean: float = 0.0
    rpe_max: float = 0.0
    rpe_rot_mean: float = 0.0  # degrees per step, secondary

    def lines(self):
        return [f"{k}={v:.9f}" for k, v in vars(self).items()]


def _check_lengths(gt: Trajectory, est: Trajectory):
    if len(gt) != len(est):
        raise LengthMismatch(f"ground truth has {len(gt)} poses, estimate has {len(est)}")


def _relative(traj: Trajectory, i: int, j: int) -> RigidTransform:
    return compose(invert(traj.poses[i]), traj.poses[j])


def kitti_segment_errors(gt: Trajectory, est: Trajectory, lengths=SEGMENT_LENGTHS,
                         step: int = 1) -> SegmentErrorReport:
    """Average drift over every sub-path of the given lengths.

    A segment starts at every ``step``-th frame and ends at the first frame
    whose ground-truth path distance from the start is at least the length;
    starts that cannot reach it are skipped.
    """
    _check_lengths(gt, est)
    if len(gt) < 2:
        raise LengthMismatch("need at least two poses")
    dist = gt.frame_distances
    report = SegmentErrorReport()
    if dist[-1] < min(lengths):
        report.insufficient_length = True
        return report
    t_all, r_all = [], []
    for length in lengths:
        t_errs, r_errs = [], []
        for first in range(0, len(gt), step):
            last = int(np.searchsorted(dist, dist[first] + length, side="left"))
            if last >= len(gt):
                break
            e = compose(invert(_relative(est, first, last)), _relative(gt, first, last))
            t_errs.append(100.0 * np.linalg.norm(e.translation) / length)
            r_errs.append(100.0 * math.degrees(rotation_geodesic_error(e.rotation, np.eye(3))) / length)
        if t_errs:
            report.per_length[length] = (float(np.mean(t_errs)), float(np.mean(r_errs)), len(t_errs))
            t_all += t_errs
            r_all += r_errs
    report.segments = len(t_all)
    if t_all:
        report.t_rel = float(np.mean(t_all))
        report.r_rel = float(np.mean(r_all))
    return report


def align_rigid(gt: Trajectory, est: Trajectory) -> RigidTransform:
    """Rigid transform moving estimated positions onto ground truth in the least-squares sense."""
    _check_lengths(gt, est)
    try:
        return kabsch_solve(est.positions, gt.positions)
    except DegenerateConfiguration:
        # collinear paths: any member of the optimal family gives the same residuals
        return kabsch_solve(est.positions, gt.positions, check_degenerate=False)


def ate(gt: Trajectory, est: Trajectory):
    """Mean and max position error after rigid alignment, in metres."""
    _check_lengths(gt, est)
    if len(gt) == 0:
        raise LengthMismatch("empty trajectories")
    if len(gt) == 1:
        return 0.0, 0.0
    aligned = apply(align_rigid(gt, est), est.positions)
    err = np.linalg.norm(aligned - gt.positions, axis=1)
    return float(err.mean()), float(err.max())


def _rpe_errors(gt: Trajectory, est: Trajectory, delta: int):
    _check_lengths(gt, est)
    if delta < 1:
        raise ValueError("delta must be at least one frame")
    if len(gt) <= delta:
        raise LengthMismatch(f"trajectory of {len(gt)} poses is too short for delta {delta}")
    trans, rot = [], []
    for i in range(len(gt) - delta):
        e = compose(invert(_relative(gt, i, i + delta)), _relative(est, i, i + delta))
        trans.append(np.linalg.norm(e.translation))
        rot.append(math.degrees(rotation_geodesic_error(e.rotation, np.eye(3))))
    return np.array(trans), np.array(rot)


def rpe(gt: Trajectory, est: Trajectory, delta: int = 1):
    """Mean and max translational error of ``delta``-frame relative motions."""
    trans, _ = _rpe_errors(gt, est, delta)
    return float(trans.mean()), float(trans.max())


def evaluate(gt: Trajectory, est: Trajectory, delta: int = 1) -> AteRpeReport:
    a_mean, a_max = ate(gt, est)
    trans, rot = _rpe_errors(gt, est, delta)
    return AteRpeReport(a_mean, a_max, float(trans.mean()), float(trans.max()), float(rot.mean()))


def registration_error(t_gt: RigidTransform, t_est: RigidTransform):
    """Angular error in degrees and translation error in metres."""
    ang = math.degrees(rotation_geodesic_error(t_est.rotation, t_gt.rotation))
    return ang, float(np.linalg.norm(np.asarray(t_est.translation) - np.asarray(t_gt.translation)))
