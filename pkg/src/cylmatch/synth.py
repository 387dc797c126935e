"""Synthetic LiDAR scenes: analytic primitives and a cell-centred ray caster.

Rays pass through cylinder cell centres, so a noiseless scan re-encoded
with the same config has zero quantisation error.

Scene file grammar (one primitive per line, ``#`` starts a comment)::

    plane <px> <py> <pz> <nx> <ny> <nz>
    box   <xmin> <ymin> <zmin> <xmax> <ymax> <zmax>
    pole  <cx> <cy> <radius> <zmin> <zmax>
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cylinder import CylinderConfig, PointCloud
from .geometry import RigidTransform, compose, rot_z

MAX_RANGE = 120.0
MISS = -1


@dataclass(frozen=True)
class Plane:
    point: tuple
    normal: tuple

    def intersect(self, o, d):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((np.asarray(self.point) - o) @ n) / denom
        t = np.where(np.abs(denom) > 1e-12, t, np.inf)
        return np.where(t > 1e-9, t, np.inf)

    def distance(self, x):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        return np.abs((x - np.asarray(self.point)) @ n)

    def normal_at(self, x):
        n = np.asarray(self.normal, dtype=np.float64)
        return np.broadcast_to(n / np.linalg.norm(n), x.shape)


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple

    def intersect(self, o, d):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (lo - o) * inv
            t2 = (hi - o) * inv
        # axis-parallel rays: slab test reduces to a containment check
        par = d == 0
        if par.any():
            inside_slab = (o >= lo) & (o <= hi)
            # outside the slab both bounds go to -inf so the exit distance can never be reached
            t1 = np.where(par, -np.inf, t1)
            t2 = np.where(par, np.where(inside_slab, np.inf, -np.inf), t2)
        tmin = np.max(np.minimum(t1, t2), axis=-1)
        tmax = np.min(np.maximum(t1, t2), axis=-1)
        hit = (tmax >= tmin) & (tmax > 1e-9)
        t = np.where(tmin > 1e-9, tmin, tmax)
        return np.where(hit, t, np.inf)

    def bounding_sphere(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        return (lo + hi) / 2, float(np.linalg.norm(hi - lo)) / 2

    def distance(self, x):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        # distance to the closest face for points on the boundary
        inner = np.minimum(np.abs(x - lo), np.abs(x - hi))
        outside = np.maximum(np.maximum(lo - x, x - hi), 0.0)
        return np.where(np.any(outside > 0, axis=-1), np.linalg.norm(outside, axis=-1), np.min(inner, axis=-1))

    def normal_at(self, x):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        dist = np.concatenate([np.abs(x - lo), np.abs(x - hi)], axis=-1)
        face = np.argmin(dist, axis=-1)
        normals = np.concatenate([-np.eye(3), np.eye(3)])
        return normals[face]


@dataclass(frozen=True)
class Pole:
    """Vertical cylinder side surface between ``zmin`` and ``zmax``."""

    center: tuple
    radius: float
    zmin: float
    zmax: float

    def intersect(self, o, d):
        cx, cy = self.center
        ox, oy = o[..., 0] - cx, o[..., 1] - cy
        dx, dy = d[..., 0], d[..., 1]
        a = dx * dx + dy * dy
        b = 2.0 * (ox * dx + oy * dy)
        c = ox * ox + oy * oy - self.radius ** 2
        disc = b * b - 4.0 * a * c
        ok = (disc >= 0) & (a > 1e-15)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t_near = (-b - sq) / (2.0 * a)
            t_far = (-b + sq) / (2.0 * a)
        best = np.full(np.shape(a), np.inf)
        for t in (t_far, t_near):
            z = o[..., 2] + t * d[..., 2]
            good = ok & (t > 1e-9) & (z >= self.zmin) & (z <= self.zmax)
            best = np.where(good, t, best)
        return best

    def bounding_sphere(self):
        half = (self.zmax - self.zmin) / 2
        return np.array([self.center[0], self.center[1], self.zmin + half]), math.hypot(self.radius, half)

    def distance(self, x):
        cx, cy = self.center
        return np.abs(np.hypot(x[..., 0] - cx, x[..., 1] - cy) - self.radius)

    def normal_at(self, x):
        cx, cy = self.center
        n = np.stack([x[..., 0] - cx, x[..., 1] - cy, np.zeros(x.shape[:-1])], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)


@dataclass(frozen=True)
class Scene:
    primitives: tuple
    texture: float = 0.35

    def __post_init__(self):
        if len(self.primitives) == 0:
            raise ValueError("scene needs at least one primitive")
        object.__setattr__(self, "primitives", tuple(self.primitives))

    def intersect(self, origins, dirs):
        """Nearest hit distance and primitive id for each ray (inf / MISS on a miss)."""
        best_t = np.full(dirs.shape[:-1], np.inf)
        best_id = np.full(dirs.shape[:-1], MISS, dtype=np.int64)
        for k, prim in enumerate(self.primitives):
            if hasattr(prim, "bounding_sphere"):
                idx = _rays_near_sphere(origins, dirs, *prim.bounding_sphere())
                if len(idx) == 0:
                    continue
                t = np.full(best_t.shape, np.inf)
                t[idx] = prim.intersect(origins[idx], dirs[idx])
            else:
                t = prim.intersect(origins, dirs)
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            best_id = np.where(closer, k, best_id)
        return best_t, best_id


def _rays_near_sphere(origins, dirs, centre, radius):
    """Indices of rays that may pass through the sphere (a conservative cull)."""
    v = centre - origins
    along = np.einsum("ij,ij->i", v, dirs) / np.linalg.norm(dirs, axis=1)
    dist2 = np.einsum("ij,ij->i", v, v)
    r2 = (radius * (1 + 1e-6) + 1e-9) ** 2
    return np.nonzero((dist2 <= r2) | ((along > 0) & (dist2 - along * along <= r2)))[0]


@dataclass(frozen=True, eq=False)
class ScanSample:
    cloud: PointCloud
    hit_primitive: np.ndarray
    sensor_pose: RigidTransform
    cells: np.ndarray  # (N, 2) row/col of the ray that produced each point


def primitive_reflectivity(pid):
    """Fixed pseudo-random base reflectivity in [0.2, 0.8] per primitive id."""
    pid = np.asarray(pid, dtype=np.float64)
    return 0.2 + 0.6 * np.mod(0.137 + pid * 0.6180339887498949, 1.0)


def _texture_bank(count: int = 16, seed: int = 11):
    """Fixed plane waves: unit directions, wavelengths (m, log-spaced) and phases."""
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(count, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    wavelengths = np.geomspace(0.3, 4.0, count)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=count)
    return dirs, wavelengths, phases


_TEXTURE = _texture_bank()


def surface_texture(x, footprint=None) -> np.ndarray:
    """World-anchored pattern in [-1, 1].

    ``footprint`` (m, per point) low-passes the pattern the way a finite beam
    spot averages it: components much finer than the spot fade out instead
    of aliasing.
    """
    x = np.asarray(x, dtype=np.float64)
    dirs, wavelengths, phases = _TEXTURE
    # float32 phase error (~1e-4 rad at 120 m) is far below the pattern's own scale
    k = (2.0 * np.pi * dirs / wavelengths[:, None]).astype(np.float32)
    waves = np.sin(x.astype(np.float32) @ k.T + phases.astype(np.float32))
    if footprint is not None:
        f2 = np.square(np.asarray(footprint, dtype=np.float32))[..., None]
        waves *= np.exp(f2 * (-2.0 / np.square(wavelengths)).astype(np.float32))
    return np.sum(waves, axis=-1, dtype=np.float64) / np.sqrt(len(wavelengths) / 2.0) / 2.0


def hit_reflectivity(pid, world_points, texture: float, footprint=None) -> np.ndarray:
    base = primitive_reflectivity(pid)
    if texture == 0:
        return base
    return np.clip(base + texture * surface_texture(world_points, footprint), 0.0, 1.0)


def beam_footprint(scene: Scene, pid, world_points, d_world, rng, cfg: CylinderConfig):
    """Approximate spot size (m) of each ray on the surface it hit."""
    normals = np.zeros_like(world_points)
    for k, prim in enumerate(scene.primitives):
        sel = pid == k
        if np.any(sel):
            normals[sel] = prim.normal_at(world_points[sel])
    cos_inc = np.abs(np.sum(normals * d_world, axis=1))
    return rng * max(cfg.dtheta, cfg.dphi) / np.maximum(cos_inc, 0.05)


def cell_directions(cfg: CylinderConfig) -> np.ndarray:
    """Unit ray direction through every cell centre, shape (H, W, 3)."""
    h = np.arange(cfg.height, dtype=np.float64)[:, None]
    w = np.arange(cfg.width, dtype=np.float64)[None, :]
    phi = cfg.phi_min + h * cfg.dphi
    theta = cfg.theta_min + w * cfg.dtheta
    cp = np.cos(phi)
    return np.stack(np.broadcast_arrays(cp * np.cos(theta), cp * np.sin(theta), np.sin(phi) + 0 * theta), axis=-1)


def raycast_scan(scene: Scene, sensor_pose: RigidTransform, cfg: CylinderConfig,
                 noise_sigma: float = 0.0, seed: int = 0, max_range: float = MAX_RANGE) -> ScanSample:
    """Cast one ray per cell centre; points are returned in the sensor frame.

    Reflectivity is the primitive's base value plus the scene's texture
    evaluated at the noiseless hit point.
    """
    d_local = cell_directions(cfg).reshape(-1, 3)
    d_world = d_local @ sensor_pose.rotation.T
    origin = np.broadcast_to(sensor_pose.translation, d_world.shape)
    t, pid = scene.intersect(origin, d_world)
    hit = np.nonzero(t <= max_range)[0]
    pts = d_local[hit] * t[hit][:, None]
    world = origin[hit] + d_world[hit] * t[hit][:, None]
    spot = beam_footprint(scene, pid[hit], world, d_world[hit], t[hit], cfg)
    cloud = PointCloud(pts, hit_reflectivity(pid[hit], world, scene.texture, spot))
    cells = np.stack(np.unravel_index(hit, (cfg.height, cfg.width)), axis=1)
    sample = ScanSample(cloud, pid[hit], sensor_pose, cells)
    return add_range_noise(sample, cfg, noise_sigma, seed)


def add_range_noise(sample: ScanSample, cfg: CylinderConfig, noise_sigma: float, seed: int = 0) -> ScanSample:
    """Perturb the ranges of a noiseless scan along its rays.

    One draw is taken per grid cell, hit or not, so the result equals a
    noisy ``raycast_scan`` with the same seed.
    """
    if noise_sigma <= 0:
        return sample
    flat = sample.cells[:, 0] * cfg.width + sample.cells[:, 1]
    d_local = cell_directions(cfg).reshape(-1, 3)[flat]
    rng_vals = np.linalg.norm(sample.cloud.points, axis=1)
    noise = np.random.default_rng(seed).normal(0.0, noise_sigma, size=cfg.height * cfg.width)
    rng_vals = np.maximum(rng_vals + noise[flat], 1e-3)
    cloud = PointCloud(d_local * rng_vals[:, None], sample.cloud.reflectivity)
    return ScanSample(cloud, sample.hit_primitive, sample.sensor_pose, sample.cells)


def make_sequence(scene: Scene, poses, cfg: CylinderConfig, noise_sigma: float = 0.0, seed: int = 0):
    """One scan per pose; the noise stream of scan ``k`` is seeded by ``(seed, k)``."""
    if len(poses) < 1:
        raise ValueError("need at least one pose")
    out = []
    for k, pose in enumerate(poses):
        sub = int(np.random.SeedSequence([seed, k]).generate_state(1)[0])
        out.append(raycast_scan(scene, pose, cfg, noise_sigma, sub))
    return out


def default_scene(sensor_height: float = 1.73) -> Scene:
    """Ground plane, two walls, eight poles and three boxes around the origin."""
    g = -sensor_height
    prims = [
        Plane((0.0, 0.0, g), (0.0, 0.0, 1.0)),
        Plane((0.0, 9.0, 0.0), (0.0, -1.0, 0.0)),
        Plane((0.0, -11.0, 0.0), (0.0, 1.0, 0.0)),
    ]
    poles = [(6.0, 4.0, 0.25), (14.0, -5.0, 0.3), (-8.0, 6.5, 0.2), (-15.0, -7.0, 0.35),
             (22.0, 3.0, 0.3), (3.0, -8.0, 0.25), (-25.0, 1.5, 0.3), (30.0, -2.5, 0.4)]
    prims += [Pole((x, y), r, g, g + 4.0 + r * 4) for x, y, r in poles]
    prims += [
        Box((9.0, 1.5, g), (11.5, 4.0, g + 1.5)),
        Box((-12.0, -6.0, g), (-9.0, -3.5, g + 2.5)),
        Box((17.0, -9.0, g), (21.0, -6.0, g + 1.0)),
    ]
    return Scene(tuple(prims))


def corridor_scene(length: float = 160.0, sensor_height: float = 1.73, seed: int = 7) -> Scene:
    """Long corridor along +x with poles and boxes scattered on both sides."""
    rng = np.random.default_rng(seed)
    g = -sensor_height
    prims = [
        Plane((0.0, 0.0, g), (0.0, 0.0, 1.0)),
        Plane((0.0, 10.0, 0.0), (0.0, -1.0, 0.0)),
        Plane((0.0, -10.0, 0.0), (0.0, 1.0, 0.0)),
    ]
    x = -30.0
    side = 1.0
    while x < length:
        y = side * rng.uniform(3.0, 8.0)
        if rng.uniform() < 0.7:
            r = rng.uniform(0.15, 0.4)
            prims.append(Pole((x, y), r, g, g + rng.uniform(3.0, 6.0)))
        else:
            sx, sy = rng.uniform(1.0, 3.0, size=2)
            prims.append(Box((x, y - sy / 2, g), (x + sx, y + sy / 2, g + rng.uniform(0.8, 2.5))))
        x += rng.uniform(2.5, 5.0)
        side = -side
    return Scene(tuple(prims))


def constant_velocity_poses(n: int, step: RigidTransform, start: RigidTransform = None):
    pose = start or RigidTransform.identity()
    out = [pose]
    for _ in range(n - 1):
        pose = compose(pose, step)
        out.append(pose)
    return out


def yaw_step(forward: float, yaw: float) -> RigidTransform:
    return RigidTransform(rot_z(yaw), (forward, 0.0, 0.0))


def parse_scene(text: str) -> Scene:
    prims = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *vals = line.split()
        try:
            nums = [float(v) for v in vals]
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        expected = {"plane": 6, "box": 6, "pole": 5}.get(kind)
        if expected is None:
            raise ValueError(f"line {lineno}: unknown primitive {kind!r}")
        if len(nums) != expected or not all(math.isfinite(v) for v in nums):
            raise ValueError(f"line {lineno}: {kind} needs {expected} finite numbers")
        if kind == "plane":
            prims.append(Plane(tuple(nums[:3]), tuple(nums[3:])))
        elif kind == "box":
            prims.append(Box(tuple(nums[:3]), tuple(nums[3:])))
        else:
            prims.append(Pole((nums[0], nums[1]), nums[2], nums[3], nums[4]))
    return Scene(tuple(prims))


def format_scene(scene: Scene) -> str:
    lines = []
    for p in scene.primitives:
        if isinstance(p, Plane):
            vals = ("plane",) + tuple(p.point) + tuple(p.normal)
        elif isinstance(p, Box):
            vals = ("box",) + tuple(p.lo) + tuple(p.hi)
        else:
            vals = ("pole", p.center[0], p.center[1], p.radius, p.zmin, p.zmax)
        lines.append(" ".join([vals[0]] + [repr(float(v)) for v in vals[1:]]))
    return "\n".join(lines) + "\n"
