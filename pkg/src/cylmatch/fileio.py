"""Readers and writers for scans, trajectories, masks, configs and dumps.

Text outputs are UTF-8 with LF endings and contain nothing that varies
between runs, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.spatial.transform import Rotation

from .cylinder import PointCloud
from .estimation import EstimatorConfig, PipelineConfig
from .evaluation import Trajectory
from .features import CONV, read_weights
from .geometry import RigidTransform, nearest_rotation

log = logging.getLogger(__name__)

ORTHO_TOL = 1e-6


class MalformedFile(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class ConfigError(ValueError):
    pass


@dataclass
class ReadStats:
    """Counters filled by readers that repair or drop input silently otherwise."""

    dropped_points: int = 0
    reorthonormalized: int = 0


def _fmt(x: float) -> str:
    # shortest round-tripping repr, negative zero folded to zero, "1.0" written as "1"
    r = repr(float(x) + 0.0)
    return r[:-2] if r.endswith(".0") else r


def _write_text(path, lines) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in lines:
            f.write(line + "\n")


# scans

def read_kitti_scan_raw(path) -> np.ndarray:
    """All ``(x, y, z, reflectance)`` float32 records of a KITTI ``.bin`` file."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) % 16:
        raise MalformedFile(f"{path}: {len(data)} bytes is not a multiple of 16")
    return np.frombuffer(data, dtype="<f4").reshape(-1, 4)


def origin_points(raw: np.ndarray) -> np.ndarray:
    """Records whose point sits exactly at the sensor origin."""
    return np.all(raw[:, :3] == 0, axis=1)


def read_kitti_scan(path, stats: ReadStats = None) -> PointCloud:
    raw = read_kitti_scan_raw(path)
    drop = origin_points(raw)
    if stats is not None:
        stats.dropped_points += int(drop.sum())
    keep = raw[~drop]
    return PointCloud(keep[:, :3].astype(np.float64), keep[:, 3].astype(np.float64))


def write_kitti_scan(path, cloud: PointCloud) -> None:
    out = np.empty((len(cloud), 4), dtype="<f4")
    out[:, :3] = cloud.points
    out[:, 3] = cloud.reflectivity
    with open(path, "wb") as f:
        f.write(out.tobytes())


# poses

def _parse_floats(path, lineno, line, count):
    parts = line.split()
    if len(parts) != count:
        raise ParseError(path, lineno, f"expected {count} values, found {len(parts)}")
    try:
        vals = [float(p) for p in parts]
    except ValueError as exc:
        raise ParseError(path, lineno, str(exc)) from None
    if not all(math.isfinite(v) for v in vals):
        raise ParseError(path, lineno, "non-finite value")
    return vals


def _data_lines(path):
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line


def _checked_rotation(rot, path, lineno, stats):
    err = np.abs(rot.T @ rot - np.eye(3)).max()
    if err > ORTHO_TOL:
        if stats is not None:
            stats.reorthonormalized += 1
        log.warning("%s:%d: rotation off by %.3g, re-orthonormalised", path, lineno, err)
        rot = nearest_rotation(rot)
    return rot


def read_kitti_poses(path, stats: ReadStats = None) -> Trajectory:
    """One row-major 3x4 ``[R | t]`` per line."""
    poses = []
    for lineno, line in _data_lines(path):
        m = np.array(_parse_floats(path, lineno, line, 12)).reshape(3, 4)
        rot = _checked_rotation(m[:, :3], path, lineno, stats)
        poses.append(RigidTransform(rot, m[:, 3]))
    return Trajectory(poses)


def write_kitti_poses(path, poses) -> None:
    lines = []
    for p in poses:
        m = np.hstack([p.rotation, np.asarray(p.translation).reshape(3, 1)])
        lines.append(" ".join(_fmt(v) for v in m.reshape(-1)))
    _write_text(path, lines)


def quaternion_xyzw(rot) -> np.ndarray:
    """Unit quaternion ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
    q = Rotation.from_matrix(rot).as_quat()
    q /= np.linalg.norm(q)
    if q[3] < 0 or (q[3] == 0 and q[np.nonzero(q)[0][0]] < 0):
        q = -q
    return q


def write_tum_trajectory(traj, timestamps, path) -> None:
    """Lines ``t tx ty tz qx qy qz qw``."""
    poses = traj.poses if isinstance(traj, Trajectory) else tuple(traj)
    ts = np.asarray(timestamps, dtype=np.float64).reshape(-1)
    if len(ts) != len(poses):
        raise ValueError(f"{len(ts)} timestamps for {len(poses)} poses")
    lines = []
    for t, p in zip(ts, poses):
        vals = list(np.asarray(p.translation, dtype=np.float64)) + list(quaternion_xyzw(p.rotation))
        lines.append(f"{t:.6f} " + " ".join(_fmt(v) for v in vals))
    _write_text(path, lines)


def read_tum_trajectory(path, stats: ReadStats = None) -> Trajectory:
    poses, ts = [], []
    for lineno, line in _data_lines(path):
        v = _parse_floats(path, lineno, line, 8)
        q = np.array(v[4:])
        if np.linalg.norm(q) < 1e-12:
            raise ParseError(path, lineno, "zero quaternion")
        ts.append(v[0])
        poses.append(RigidTransform(Rotation.from_quat(q).as_matrix(), v[1:4]))
    return Trajectory(poses, np.array(ts))


def read_trajectory(path, stats: ReadStats = None) -> Trajectory:
    """KITTI (12 values per line) or TUM (8 values per line), decided by the first data line."""
    for lineno, line in _data_lines(path):
        n = len(line.split())
        if n == 8:
            return read_tum_trajectory(path, stats)
        if n == 12:
            return read_kitti_poses(path, stats)
        raise ParseError(path, lineno, f"expected 12 (KITTI) or 8 (TUM) values, found {n}")
    return Trajectory(())


# moving-object masks

def read_moving_mask(path, expected_points: int = None) -> np.ndarray:
    """``u32`` count then one 0/1 byte per point."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4:
        raise MalformedFile(f"{path}: missing point count")
    count = int(np.frombuffer(data[:4], dtype="<u4")[0])
    if len(data) != 4 + count:
        raise MalformedFile(f"{path}: header says {count} points, body has {len(data) - 4} bytes")
    mask = np.frombuffer(data[4:], dtype=np.uint8)
    bad = np.nonzero(mask > 1)[0]
    if len(bad):
        raise MalformedFile(f"{path}: byte {int(bad[0])} is {int(mask[bad[0]])}, expected 0 or 1")
    if expected_points is not None and count != expected_points:
        raise MalformedFile(f"{path}: {count} mask entries for a scan of {expected_points} points")
    return mask.astype(bool)


def write_moving_mask(path, mask) -> None:
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    with open(path, "wb") as f:
        f.write(np.array([len(mask)], dtype="<u4").tobytes())
        f.write(mask.astype(np.uint8).tobytes())


# dumps

def write_gt_dump(path, correspondences) -> None:
    """``ref_h ref_w tgt_h tgt_w e`` per correspondence."""
    _write_text(path, [f"{c.ref_cell[0]} {c.ref_cell[1]} {_fmt(c.tgt_coord[0])} {_fmt(c.tgt_coord[1])} "
                       f"{_fmt(c.range_error)}" for c in correspondences])


def write_match_dump(path, match_field) -> None:
    """``ref_h ref_w off_h off_w confidence`` per valid cell."""
    _write_text(path, [f"{h} {w} {_fmt(oh)} {_fmt(ow)} {_fmt(q)}" for h, w, oh, ow, q in match_field.records()])


# configuration

@dataclass(frozen=True)
class RunPaths:
    input_dir: str = None
    gt_poses: str = None
    mask_dir: str = None
    output_dir: str = None

    def check(self):
        """Every referenced input must exist; the output directory is created on demand."""
        for name in ("input_dir", "gt_poses", "mask_dir"):
            p = getattr(self, name)
            if p is not None and not os.path.exists(p):
                raise FileNotFoundError(f"paths.{name}: {p} does not exist")


@dataclass(frozen=True)
class RunConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    paths: RunPaths = field(default_factory=RunPaths)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment; later keys win."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ParseError(source, lineno, f"expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def _pair(value: str):
    parts = value.replace("x", ",").split(",")
    if len(parts) != 2:
        raise ValueError(f"expected two integers like 4x8, got {value!r}")
    return int(parts[0]), int(parts[1])


def _bool(value: str) -> bool:
    v = value.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {value!r}")


def _optional(conv):
    return lambda v: None if v.lower() == "none" else conv(v)


_CYLINDER_KEYS = {
    "dtheta_deg": ("dtheta", lambda v: math.radians(float(v))),
    "dphi_deg": ("dphi", lambda v: math.radians(float(v))),
    "phi_min_deg": ("phi_min", lambda v: math.radians(float(v))),
    "theta_min_deg": ("theta_min", lambda v: math.radians(float(v))),
    "height": ("height", int),
    "width": ("width", int),
    "reflectivity_scale": ("reflectivity_scale", float),
}
_EXTRACTOR_KEYS = {"kind": str, "stride": _pair, "patch": _pair, "channels": int, "seed": int, "weights": str}
_MATCHER_KEYS = {"d_coarse": int, "d_refine": int, "temperature": float,
                 "coarse_temperature": _optional(float)}
_ESTIMATOR_TYPES = {"weighted_refit": _bool}


def _estimator_conv(name):
    if name in _ESTIMATOR_TYPES:
        return _ESTIMATOR_TYPES[name]
    default = EstimatorConfig.__dataclass_fields__[name].default
    return type(default)


def build_run_config(settings: dict, check_paths: bool = True) -> RunConfig:
    """Turn dotted ``key -> text`` settings into a validated ``RunConfig``."""
    base = PipelineConfig()
    cyl, coarse, refine, top, est, paths = {}, {}, {}, {}, {}, {}
    est_fields = {f.name for f in fields(EstimatorConfig)}
    path_fields = {f.name for f in fields(RunPaths)}
    for key, value in settings.items():
        section, _, name = key.partition(".")
        try:
            if key == "cylinder.crop":
                top["crop"] = _optional(_pair)(value)
            elif section == "cylinder" and name in _CYLINDER_KEYS:
                attr, conv = _CYLINDER_KEYS[name]
                cyl[attr] = conv(value)
            elif section in ("coarse", "refine") and name in _EXTRACTOR_KEYS:
                (coarse if section == "coarse" else refine)[name] = _EXTRACTOR_KEYS[name](value)
            elif section == "matcher" and name in _MATCHER_KEYS:
                top[name] = _MATCHER_KEYS[name](value)
            elif section == "estimator" and name in est_fields:
                est[name] = _estimator_conv(name)(value)
            elif section == "paths" and name in path_fields:
                paths[name] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{key}: {exc}") from None

    # weight files are data, so their errors are not turned into ConfigError
    for opts in (coarse, refine):
        if "weights" in opts:
            opts["layers"] = read_weights(opts.pop("weights"))
            opts.setdefault("kind", CONV)
    try:
        pipeline = replace(
            base,
            cylinder=replace(base.cylinder, **cyl) if cyl else base.cylinder,
            coarse=replace(base.coarse, **coarse) if coarse else base.coarse,
            refine=replace(base.refine, **refine) if refine else base.refine,
            estimator=replace(base.estimator, **est) if est else base.estimator,
            **top)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    run_paths = RunPaths(**paths)
    if check_paths:
        run_paths.check()
    return RunConfig(pipeline, run_paths)


def load_run_config(path=None, overrides=None, check_paths: bool = True) -> RunConfig:
    """Defaults, then the config file, then ``overrides`` (highest precedence)."""
    settings = {}
    if path is not None:
        with open(path, encoding="utf-8") as f:
            settings.update(parse_config_text(f.read(), str(path)))
    settings.update(overrides or {})
    return build_run_config(settings, check_paths)
