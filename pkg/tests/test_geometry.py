import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cylmatch.geometry import (DegenerateConfiguration, RigidTransform, apply, axis_angle, compose, invert,
                               kabsch_batch, kabsch_solve, nearest_rotation, rot_x, rot_z, rotation_geodesic_error,
                               svd3, svd3_batch)

from conftest import random_transform

seeds = st.integers(0, 2**32 - 1)


def assert_transform_close(a, b, tol):
    np.testing.assert_allclose(a.rotation, b.rotation, atol=tol, rtol=0)
    np.testing.assert_allclose(a.translation, b.translation, atol=tol, rtol=0)


class TestCompose:
    def test_identity_left(self, rng):
        t = random_transform(rng)
        assert_transform_close(compose(RigidTransform.identity(), t), t, 0)

    def test_with_inverse_is_identity(self, rng):
        t = random_transform(rng)
        assert_transform_close(compose(t, invert(t)), RigidTransform.identity(), 1e-12)

    def test_z_rotations_add(self):
        r = compose(RigidTransform(rot_z(math.radians(30)), np.zeros(3)),
                    RigidTransform(rot_z(math.radians(60)), np.zeros(3)))
        np.testing.assert_allclose(r.rotation, rot_z(math.radians(90)), atol=1e-15)

    def test_matches_homogeneous_product(self, rng):
        a, b = random_transform(rng), random_transform(rng)
        np.testing.assert_allclose(compose(a, b).as_matrix(), a.as_matrix() @ b.as_matrix(), atol=1e-12)

    def test_matmul_operator(self, rng):
        a, b = random_transform(rng), random_transform(rng)
        assert_transform_close(a @ b, compose(a, b), 0)


class TestInvert:
    def test_identity(self):
        assert_transform_close(invert(RigidTransform.identity()), RigidTransform.identity(), 0)

    def test_pure_translation(self):
        np.testing.assert_array_equal(invert(RigidTransform(np.eye(3), (1, 2, 3))).translation, [-1, -2, -3])

    @given(seeds)
    @settings(max_examples=50, deadline=None)
    def test_round_trip(self, seed):
        t = random_transform(np.random.default_rng(seed))
        assert_transform_close(compose(invert(t), t), RigidTransform.identity(), 1e-12)


class TestApply:
    def test_identity(self):
        np.testing.assert_array_equal(apply(RigidTransform.identity(), (1, 2, 3)), [1, 2, 3])

    def test_axis_rotation(self):
        np.testing.assert_allclose(apply(RigidTransform(rot_z(math.pi / 2), np.zeros(3)), (1, 0, 0)),
                                   [0, 1, 0], atol=1e-12)

    def test_matches_homogeneous(self, rng):
        t = random_transform(rng)
        p = rng.normal(size=(20, 3))
        homo = (t.as_matrix() @ np.hstack([p, np.ones((20, 1))]).T).T[:, :3]
        np.testing.assert_allclose(apply(t, p), homo, atol=1e-12)

    def test_compose_acts_in_order(self, rng):
        a, b = random_transform(rng), random_transform(rng)
        p = rng.normal(size=3)
        np.testing.assert_allclose(apply(compose(a, b), p), apply(a, apply(b, p)), atol=1e-12)


class TestSvd3:
    @given(seeds)
    @settings(max_examples=100, deadline=None)
    def test_reconstructs(self, seed):
        a = np.random.default_rng(seed).normal(size=(3, 3))
        u, s, vt = svd3(a)
        np.testing.assert_allclose(u @ np.diag(s) @ vt, a, atol=1e-12)
        np.testing.assert_allclose(u.T @ u, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(vt @ vt.T, np.eye(3), atol=1e-12)
        assert np.all(np.diff(s) <= 0) and s[-1] >= 0

    def test_singular_values_match_lapack(self, rng):
        a = rng.normal(size=(50, 3, 3))
        _, s, _ = svd3_batch(a)
        np.testing.assert_allclose(s, np.linalg.svd(a, compute_uv=False), atol=1e-12)

    def test_rank_deficient(self):
        a = np.outer([1.0, 2.0, 3.0], [0.5, -1.0, 2.0])
        u, s, vt = svd3(a)
        np.testing.assert_allclose(u @ np.diag(s) @ vt, a, atol=1e-12)
        assert s[1] < 1e-12

    def test_zero_matrix(self):
        u, s, vt = svd3(np.zeros((3, 3)))
        np.testing.assert_array_equal(s, 0)
        np.testing.assert_allclose(u.T @ u, np.eye(3), atol=1e-15)

    def test_batch_agrees_with_single(self, rng):
        a = rng.normal(size=(50, 3, 3))
        ub, sb, vb = svd3_batch(a)
        for k in range(50):
            u, s, vt = svd3(a[k])
            np.testing.assert_allclose(s, sb[k], rtol=1e-13)
            np.testing.assert_allclose(u, ub[k], atol=1e-13)
            np.testing.assert_allclose(vt, vb[k], atol=1e-13)

    def test_single_is_repeatable(self, rng):
        a = rng.normal(size=(3, 3))
        assert all(x.tobytes() == y.tobytes() for x, y in zip(svd3(a), svd3(a.copy())))

    def test_non_finite_input(self):
        _, s, _ = svd3(np.full((3, 3), np.nan))
        assert np.isnan(s).any()


class TestKabsch:
    def test_identical_sets_give_identity(self, rng):
        p = rng.normal(size=(10, 3))
        assert_transform_close(kabsch_solve(p, p), RigidTransform.identity(), 1e-12)

    @given(seeds)
    @settings(max_examples=100, deadline=None)
    def test_recovers_exact_transform(self, seed):
        rng = np.random.default_rng(seed)
        t0 = random_transform(rng)
        p = rng.uniform(-10, 10, size=(rng.integers(4, 30), 3))
        t = kabsch_solve(p, apply(t0, p))
        assert_transform_close(t, t0, 1e-9)

    def test_noisy_fit(self):
        rng = np.random.default_rng(5)
        t0 = random_transform(rng)
        p = rng.uniform(-10, 10, size=(1000, 3))
        q = apply(t0, p) + rng.normal(0, 0.01, size=p.shape)
        t = kabsch_solve(p, q)
        # per-coordinate RMS, comparable with the per-axis sigma
        rms = np.sqrt(np.mean((apply(t, p) - q) ** 2))
        assert rms <= 1.1 * 0.01
        assert math.degrees(rotation_geodesic_error(t.rotation, t0.rotation)) < 0.1

    def test_planar_input_gives_proper_rotation(self, rng):
        p = np.column_stack([rng.normal(size=(20, 2)), np.zeros(20)])
        q = p * np.array([1.0, 1.0, -1.0]) + rng.normal(0, 0.05, size=p.shape)
        t = kabsch_solve(p, q)
        assert t.is_valid()

    def test_reflection_prone_set(self):
        # mirror image of a tetrahedron: the unconstrained optimum is a reflection
        p = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
        t = kabsch_solve(p, p * np.array([1, 1, -1.0]))
        assert t.is_valid()

    def test_collinear_raises(self):
        p = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
        with pytest.raises(DegenerateConfiguration):
            kabsch_solve(p, p + 1)

    def test_coincident_raises(self):
        p = np.ones((4, 3))
        with pytest.raises(DegenerateConfiguration):
            kabsch_solve(p, p)

    def test_too_few_points(self):
        with pytest.raises(DegenerateConfiguration):
            kabsch_solve(np.eye(3)[:2], np.eye(3)[:2])

    def test_uniform_weights_equal_unweighted(self, rng):
        p = rng.normal(size=(30, 3))
        q = apply(random_transform(rng), p) + rng.normal(0, 0.1, size=p.shape)
        assert_transform_close(kabsch_solve(p, q, np.full(30, 2.5)), kabsch_solve(p, q), 1e-12)

    def test_zero_weight_ignores_outlier(self, rng):
        t0 = random_transform(rng)
        p = rng.normal(size=(10, 3))
        q = apply(t0, p)
        q[0] += 100.0
        w = np.ones(10)
        w[0] = 0.0
        assert_transform_close(kabsch_solve(p, q, w), t0, 1e-9)

    def test_bad_weights(self, rng):
        p = rng.normal(size=(5, 3))
        with pytest.raises(ValueError):
            kabsch_solve(p, p, -np.ones(5))
        with pytest.raises(DegenerateConfiguration):
            kabsch_solve(p, p, np.zeros(5))

    @given(seeds)
    @settings(max_examples=50, deadline=None)
    def test_conjugation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        a, t0 = random_transform(rng), random_transform(rng)
        p = rng.normal(size=(12, 3))
        q = apply(t0, p) + rng.normal(0, 0.05, size=p.shape)
        lhs = kabsch_solve(apply(a, p), apply(a, q))
        rhs = compose(compose(a, kabsch_solve(p, q)), invert(a))
        assert_transform_close(lhs, rhs, 1e-9)

    @given(seeds)
    @settings(max_examples=50, deadline=None)
    def test_output_is_valid(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.normal(size=(rng.integers(3, 10), 3))
        q = rng.normal(size=p.shape)
        try:
            t = kabsch_solve(p, q)
        except DegenerateConfiguration:
            return
        assert t.is_valid()

    def test_batch_matches_single(self, rng):
        src = rng.normal(size=(8, 5, 3))
        t0 = [random_transform(rng) for _ in range(8)]
        dst = np.stack([apply(t, s) for t, s in zip(t0, src)])
        rot, trans, ok = kabsch_batch(src, dst)
        assert ok.all()
        for k in range(8):
            np.testing.assert_allclose(rot[k], t0[k].rotation, atol=1e-9)
            np.testing.assert_allclose(trans[k], t0[k].translation, atol=1e-9)

    def test_batch_flags_degenerate(self):
        src = np.stack([np.outer(np.arange(3.0), [1, 1, 0]), np.eye(3)])
        _, _, ok = kabsch_batch(src, src)
        assert ok.tolist() == [False, True]


class TestGeodesicError:
    def test_zero(self, rng):
        r = random_transform(rng).rotation
        assert rotation_geodesic_error(r, r) == 0.0

    def test_known_angle(self, rng):
        r = random_transform(rng).rotation
        assert abs(rotation_geodesic_error(rot_z(0.2) @ r, r) - 0.2) < 1e-12

    def test_half_turn(self, rng):
        axis = rng.normal(size=3)
        assert abs(rotation_geodesic_error(axis_angle(axis, math.pi), np.eye(3)) - math.pi) < 1e-7

    @given(seeds, st.floats(0.0, math.pi))
    @settings(max_examples=100, deadline=None)
    def test_symmetric_and_equals_relative_angle(self, seed, angle):
        rng = np.random.default_rng(seed)
        r_gt = random_transform(rng).rotation
        r = axis_angle(rng.normal(size=3), angle) @ r_gt
        e = rotation_geodesic_error(r, r_gt)
        assert e == rotation_geodesic_error(r_gt, r)
        assert 0.0 <= e <= math.pi
        assert abs(e - angle) < 1e-6


class TestRigidTransform:
    def test_is_valid(self):
        assert RigidTransform(rot_x(0.3), np.zeros(3)).is_valid()
        assert not RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3)).is_valid()

    def test_from_matrix_round_trip(self, rng):
        t = random_transform(rng)
        assert_transform_close(RigidTransform.from_matrix(t.as_matrix()), t, 0)

    def test_nearest_rotation(self, rng):
        r = random_transform(rng).rotation
        np.testing.assert_allclose(nearest_rotation(r + 1e-5 * rng.normal(size=(3, 3))), r, atol=1e-4)
        assert RigidTransform(nearest_rotation(rng.normal(size=(3, 3))), np.zeros(3)).is_valid()
