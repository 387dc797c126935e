"""Rigid-body transforms and closed-form point-set alignment."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DegenerateConfiguration(ValueError):
    """Point sets do not determine a unique rigid alignment."""


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid motion ``p -> R p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        ortho = np.max(np.abs(r.T @ r - np.eye(3)))
        return bool(ortho < tol and abs(np.linalg.det(r) - 1.0) < tol)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def __repr__(self):
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -(rt @ t.translation))


def apply(t: RigidTransform, p) -> np.ndarray:
    """Apply ``t`` to a 3-vector or to an (N, 3) array of points."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 1:
        return t.rotation @ p + t.translation
    return p @ t.rotation.T + t.translation


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about ``axis`` (need not be unit length)."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(angle) * kx + (1.0 - math.cos(angle)) * (kx @ kx)


def random_rotation(rng: np.random.Generator, max_angle: float = math.pi) -> np.ndarray:
    axis = rng.normal(size=3)
    return axis_angle(axis, rng.uniform(0.0, max_angle))


def svd3(a) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SVD of a 3x3 matrix by one-sided (Hestenes) Jacobi rotations.

    Returns ``u, s, vt`` with ``a = u @ diag(s) @ vt``, singular values in
    descending order and ``u``, ``vt`` orthonormal even when ``a`` is rank
    deficient. Pure float arithmetic, so results do not depend on the LAPACK
    build.
    """
    m = np.asarray(a, dtype=np.float64).reshape(3, 3)
    if not np.all(np.isfinite(m)):
        u, s, vt = svd3_batch(m.reshape(1, 3, 3))
        return u[0], s[0], vt[0]
    return _svd3_scalar(m)


def _svd3_scalar(m):
    """``svd3_batch`` for one finite matrix on Python floats, avoiding per-call array overhead."""
    w = [[float(m[r, c]) for r in range(3)] for c in range(3)]  # columns
    v = [[1.0 if r == c else 0.0 for r in range(3)] for c in range(3)]
    for _ in range(60):
        rotated = False
        for i, j in ((0, 1), (0, 2), (1, 2)):
            wi, wj = w[i], w[j]
            alpha = wi[0] * wi[0] + wi[1] * wi[1] + wi[2] * wi[2]
            beta = wj[0] * wj[0] + wj[1] * wj[1] + wj[2] * wj[2]
            gamma = wi[0] * wj[0] + wi[1] * wj[1] + wi[2] * wj[2]
            if gamma == 0.0 or not abs(gamma) > 1e-15 * math.sqrt(alpha * beta):
                continue
            rotated = True
            zeta = (beta - alpha) / (2.0 * gamma)
            if math.isinf(zeta):
                t = 0.0 if zeta > 0 else -0.0
            else:
                t = (1.0 if zeta >= 0 else -1.0) / (abs(zeta) + math.hypot(1.0, zeta))
            c = 1.0 / math.sqrt(1.0 + t * t)
            sn = c * t
            w[i] = [c * x - sn * y for x, y in zip(wi, wj)]
            w[j] = [sn * x + c * y for x, y in zip(wi, wj)]
            vi, vj = v[i], v[j]
            v[i] = [c * x - sn * y for x, y in zip(vi, vj)]
            v[j] = [sn * x + c * y for x, y in zip(vi, vj)]
        if not rotated:
            break
    w = np.array(w).T
    v = np.array(v).T
    sv = np.sqrt(np.sum(w * w, axis=0))
    order = np.argsort(-sv, kind="stable")
    u, s, vt = _finish_svd(w[None][:, :, order], sv[None][:, order], v[None][:, :, order])
    return u[0], s[0], vt[0]


def svd3_batch(a) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``svd3`` over a stack of shape (k, 3, 3)."""
    w = np.array(a, dtype=np.float64).reshape(-1, 3, 3)
    k = w.shape[0]
    v = np.tile(np.eye(3), (k, 1, 1))
    active = np.ones(k, dtype=bool)
    for _ in range(60):
        rotated = np.zeros(k, dtype=bool)
        for i, j in ((0, 1), (0, 2), (1, 2)):
            wi, wj = w[:, :, i].copy(), w[:, :, j].copy()
            alpha = np.sum(wi * wi, axis=1)
            beta = np.sum(wj * wj, axis=1)
            gamma = np.sum(wi * wj, axis=1)
            rot = active & (gamma != 0.0) & (np.abs(gamma) > 1e-15 * np.sqrt(alpha * beta))
            if not rot.any():
                continue
            rotated |= rot
            g = np.where(rot, gamma, 1.0)
            with np.errstate(over="ignore", divide="ignore"):
                # huge zeta means a negligible rotation: t -> 0
                zeta = (beta - alpha) / (2.0 * g)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = np.where(rot, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            sn = np.where(rot, c * t, 0.0)
            c, sn = c[:, None], sn[:, None]
            w[:, :, i], w[:, :, j] = c * wi - sn * wj, sn * wi + c * wj
            vi, vj = v[:, :, i].copy(), v[:, :, j].copy()
            v[:, :, i], v[:, :, j] = c * vi - sn * vj, sn * vi + c * vj
        active &= rotated
        if not active.any():
            break

    sv = np.sqrt(np.sum(w * w, axis=1))
    order = np.argsort(-sv, axis=1, kind="stable")
    sv = np.take_along_axis(sv, order, axis=1)
    w = np.take_along_axis(w, order[:, None, :], axis=2)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    return _finish_svd(w, sv, v)


def _finish_svd(w, sv, v):
    """Left singular vectors from the rotated columns ``w`` sorted by ``sv``."""
    k = w.shape[0]
    u = np.zeros((k, 3, 3))
    zero = ~(sv[:, 0] > 1e-300)
    u0 = w[:, :, 0] / np.where(zero, 1.0, sv[:, 0])[:, None]
    u0[zero] = np.array([1.0, 0.0, 0.0])
    u[:, :, 0] = u0
    full = sv[:, 1] > 1e-14 * sv[:, 0]
    basis = np.eye(3)[np.argmin(np.abs(u0), axis=1)]
    # any unit vector orthogonal to u0 when the second direction is undefined
    e = np.where(full[:, None], w[:, :, 1], basis)
    u1 = e - np.sum(e * u0, axis=1, keepdims=True) * u0
    u1 /= np.linalg.norm(u1, axis=1, keepdims=True)
    u[:, :, 1] = u1
    u2 = np.cross(u0, u1)
    flip = np.sum(w[:, :, 2] * u2, axis=1) < 0.0
    u[:, :, 2] = np.where(flip[:, None], -u2, u2)
    u[zero] = np.eye(3)
    return u, sv, np.transpose(v, (0, 2, 1))


def kabsch_batch(source, target):
    """Unweighted Kabsch on stacks of point sets of shape (k, m, 3).

    Returns ``(rotations, translations, ok)`` where ``ok`` flags sets that
    are not collinear or coincident.
    """
    p = np.asarray(source, dtype=np.float64)
    q = np.asarray(target, dtype=np.float64)
    p_mean = p.mean(axis=1)
    q_mean = q.mean(axis=1)
    pc = p - p_mean[:, None, :]
    qc = q - q_mean[:, None, :]
    h = np.einsum("kni,knj->kij", pc, qc) / p.shape[1]
    u, s, vt = svd3_batch(h)
    ok = (s[:, 0] > 0) & (s[:, 1] >= 1e-12 * s[:, 0])
    v = np.transpose(vt, (0, 2, 1))
    r = v @ np.transpose(u, (0, 2, 1))
    neg = np.linalg.det(r) < 0
    if neg.any():
        v[neg, :, 2] = -v[neg, :, 2]
        r[neg] = v[neg] @ np.transpose(u[neg], (0, 2, 1))
    t = q_mean - np.einsum("kij,kj->ki", r, p_mean)
    return r, t, ok


def kabsch_solve(source, target, weights=None, check_degenerate: bool = True) -> RigidTransform:
    """Least-squares rigid transform ``T`` minimising ``sum w_i |q_i - T p_i|^2``.

    ``source`` holds the points ``p_i`` and ``target`` the matched ``q_i``.
    Reflections are corrected so the result is always a proper rotation.
    Raises DegenerateConfiguration for collinear or coincident sets unless
    ``check_degenerate`` is off, in which case an arbitrary member of the
    optimal family is returned.
    """
    p = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if p.shape != q.shape:
        raise ValueError(f"point set sizes differ: {p.shape[0]} vs {q.shape[0]}")
    if p.shape[0] < 3 and check_degenerate:
        raise DegenerateConfiguration(f"need at least 3 point pairs, got {p.shape[0]}")
    if weights is None:
        w = np.full(p.shape[0], 1.0 / p.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != p.shape[0] or np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite, nonnegative and one per pair")
        total = w.sum()
        if total <= 0:
            raise DegenerateConfiguration("all weights are zero")
        w = w / total

    p_mean = w @ p
    q_mean = w @ q
    pc = p - p_mean
    qc = q - q_mean
    h = (pc * w[:, None]).T @ qc

    u, s, vt = svd3(h)
    if check_degenerate and not (s[0] > 0 and s[1] >= 1e-12 * s[0]):
        raise DegenerateConfiguration("points are collinear or coincident")
    v = vt.T
    r = v @ u.T
    if np.linalg.det(r) < 0:
        v[:, 2] = -v[:, 2]
        r = v @ u.T
    t = q_mean - r @ p_mean
    return RigidTransform(r, t)


def rotation_geodesic_error(r_est, r_gt) -> float:
    """Angle in radians of the rotation taking ``r_gt`` to ``r_est``."""
    d = np.linalg.norm(np.asarray(r_est, dtype=np.float64) - np.asarray(r_gt, dtype=np.float64))
    arg = min(1.0, max(0.0, d / (2.0 * math.sqrt(2.0))))
    return 2.0 * math.asin(arg)


def nearest_rotation(m) -> np.ndarray:
    """Project a 3x3 matrix onto SO(3) in the Frobenius sense."""
    u, _, vt = svd3(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u = u.copy()
        u[:, 2] = -u[:, 2]
        r = u @ vt
    return r
