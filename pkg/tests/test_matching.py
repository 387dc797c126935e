import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cylmatch.cylinder import crop_center, encode
from cylmatch.features import FeatureMap, coarse_spec, refine_spec
from cylmatch.geometry import RigidTransform, rot_z
from cylmatch.gt import bilinear_distribution
from cylmatch.matching import (MatchField, ProbabilityVolume, ShapeMismatch, SimilarityVolume, block_origins,
                               cascade_match, correlate, correlate_blocks, decode_subpixel, embed_distribution,
                               loss_grad_logits, round_half_away, softmax_volume, subpixel_loss, upsample_origins)
from cylmatch.synth import default_scene, raycast_scan


def unit_map(rng, rows, cols, c=16, cyclic=False, invalid=0.0):
    v = rng.normal(size=(rows, cols, c))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    valid = rng.uniform(size=(rows, cols)) >= invalid
    v[~valid] = 0.0
    return FeatureMap(v, valid, (1, 1), cyclic)


def prob_volume(grid, origin=(0, 0)):
    d = grid.shape[0]
    return ProbabilityVolume(np.asarray(grid, dtype=np.float64).reshape(1, 1, d, d),
                             np.array(origin, dtype=np.int64).reshape(1, 1, 2), np.ones((1, 1), dtype=bool))


@pytest.fixture(scope="module")
def scene_images():
    from cylmatch.cylinder import CylinderConfig
    cfg = CylinderConfig.kitti()
    scene = default_scene()
    ref = crop_center(encode(raycast_scan(scene, RigidTransform.identity(), cfg).cloud, cfg), 64, 1792)
    # turning the sensor clockwise moves the scene 20 columns counter-clockwise
    turned = raycast_scan(scene, RigidTransform(rot_z(-20 * cfg.dtheta), np.zeros(3)), cfg)
    tgt = crop_center(encode(turned.cloud, cfg), 64, 1792)
    return ref, tgt


class TestCorrelate:
    def test_self_product_is_one(self, rng):
        fm = unit_map(rng, 6, 10, invalid=0.2)
        sv = correlate(fm, fm, 5)
        np.testing.assert_allclose(sv.scores[fm.valid][:, 2, 2], 1.0, atol=1e-9)
        assert np.all(np.isneginf(sv.scores[~fm.valid]))

    def test_planted_match(self):
        rows, cols = 6, 9
        ref = np.eye(rows * cols).reshape(rows, cols, -1)
        tgt = np.zeros_like(ref)
        tgt[1:, 2:] = ref[:-1, :-2]
        sv = correlate(FeatureMap(ref, np.ones((rows, cols), bool), (1, 1)),
                       FeatureMap(tgt, np.ones((rows, cols), bool), (1, 1)), 5)
        for i in range(rows - 1):
            for j in range(cols - 2):
                a, b = np.unravel_index(np.argmax(sv.scores[i, j]), (5, 5))
                assert (a - 2, b - 2) == (1, 2)

    def test_scores_bounded(self, rng):
        a, b = unit_map(rng, 5, 7), unit_map(rng, 5, 7)
        s = correlate(a, b, 3).scores
        finite = s[np.isfinite(s)]
        assert finite.min() >= -1 - 1e-12 and finite.max() <= 1 + 1e-12

    def test_rows_do_not_wrap(self, rng):
        fm = unit_map(rng, 4, 8, cyclic=True)
        sv = correlate(fm, fm, 3)
        assert np.all(np.isneginf(sv.scores[0, :, 0, :]))
        assert np.all(np.isneginf(sv.scores[-1, :, 2, :]))
        # columns wrap on a cyclic map
        assert np.all(np.isfinite(sv.scores[:, 0, 1, 0]))

    def test_columns_clip_without_wrap(self, rng):
        fm = unit_map(rng, 4, 8)
        sv = correlate(fm, fm, 3)
        assert np.all(np.isneginf(sv.scores[:, 0, :, 0]))

    def test_swap_symmetry(self, rng):
        a, b = unit_map(rng, 6, 8, cyclic=True), unit_map(rng, 6, 8, cyclic=True)
        d, r = 5, 2
        ab, ba = correlate(a, b, d).scores, correlate(b, a, d).scores
        for i in range(6):
            for j in range(8):
                for u in range(d):
                    for v in range(d):
                        ti, tj = i + u - r, (j + v - r) % 8
                        if 0 <= ti < 6:
                            assert ab[i, j, u, v] == pytest.approx(ba[ti, tj, 2 * r - u, 2 * r - v], abs=1e-12)

    def test_origins_shift_window(self, rng):
        fm = unit_map(rng, 8, 12)
        origins = np.zeros((8, 12, 2), dtype=np.int64)
        origins[..., 1] = 2
        shifted = correlate(fm, fm, 3, origins).scores
        base = correlate(fm, fm, 7).scores
        np.testing.assert_array_equal(shifted[:, :, :, :], base[:, :, 2:5, 4:7])

    def test_even_width_rejected(self, rng):
        fm = unit_map(rng, 3, 3)
        with pytest.raises(ValueError):
            correlate(fm, fm, 4)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            correlate(unit_map(rng, 3, 4), unit_map(rng, 3, 5), 3)

    @pytest.mark.parametrize("cyclic", [False, True])
    def test_block_path_equals_general(self, rng, cyclic):
        a, b = unit_map(rng, 8, 24, cyclic=cyclic, invalid=0.1), unit_map(rng, 8, 24, cyclic=cyclic, invalid=0.1)
        blk = rng.integers(-3, 4, size=(2, 3, 2))
        full = np.repeat(np.repeat(blk, 4, 0), 8, 1)
        assert np.array_equal(block_origins(full, (4, 8)), blk)
        np.testing.assert_allclose(correlate_blocks(a, b, 5, blk, (4, 8)).scores, correlate(a, b, 5, full).scores,
                                   atol=1e-12)

    def test_block_origins_rejects_varying_tiles(self):
        full = np.zeros((8, 16, 2), dtype=np.int64)
        full[1, 1, 0] = 1
        assert block_origins(full, (4, 8)) is None

    def test_coarse_capacity(self):
        d, (n, m) = 11, coarse_spec().stride
        assert ((d - 1) // 2 * n, (d - 1) // 2 * m) == (20, 40)


class TestSoftmax:
    def sv(self, scores):
        s = np.asarray(scores, dtype=np.float64)
        d = s.shape[-1]
        return SimilarityVolume(s.reshape(1, 1, d, d), np.zeros((1, 1, 2), dtype=np.int64), np.ones((1, 1), bool))

    def test_uniform(self):
        np.testing.assert_allclose(softmax_volume(self.sv(np.full((5, 5), 0.3))).probs, 1 / 25, atol=1e-15)

    def test_peaked(self):
        s = np.zeros((3, 3))
        s[1, 2] = 10.0
        p = softmax_volume(self.sv(s)).probs[0, 0]
        assert p[1, 2] == pytest.approx(math.exp(10) / (math.exp(10) + 8), abs=1e-12)
        assert p[1, 2] == pytest.approx(0.99964, abs=1e-5)

    def test_neg_inf_gets_zero(self):
        s = np.zeros((3, 3))
        s[0, :] = -np.inf
        p = softmax_volume(self.sv(s)).probs[0, 0]
        assert np.all(p[0] == 0)
        np.testing.assert_allclose(p[1:], 1 / 6)

    def test_all_neg_inf_is_invalid(self):
        pv = softmax_volume(self.sv(np.full((3, 3), -np.inf)))
        assert not pv.valid[0, 0]
        assert not pv.probs.any()

    def test_temperature(self):
        s = np.zeros((3, 3))
        s[0, 0] = 1.0
        p = softmax_volume(self.sv(s), 0.5).probs[0, 0]
        assert p[0, 0] == pytest.approx(math.exp(2) / (math.exp(2) + 8))
        with pytest.raises(ValueError):
            softmax_volume(self.sv(s), 0.0)

    @given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
    @settings(max_examples=50, deadline=None)
    def test_sum_shift_and_argmax(self, seed, shift):
        rng = np.random.default_rng(seed)
        s = rng.uniform(-1, 1, size=(5, 5))
        p = softmax_volume(self.sv(s)).probs[0, 0]
        assert p.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(p >= 0)
        np.testing.assert_allclose(softmax_volume(self.sv(s + shift)).probs[0, 0], p, atol=1e-12)
        assert np.argmax(p) == np.argmax(s)


class TestDecode:
    def test_bilinear_exact(self):
        grid = embed_distribution(bilinear_distribution((2.3, 5.7)), (0, 0), 15)
        mf = decode_subpixel(prob_volume(grid))
        np.testing.assert_allclose(mf.offset[0, 0], [2.3, 5.7], atol=1e-12)
        assert mf.confidence[0, 0] == pytest.approx(1.0)

    def test_uniform_window(self):
        grid = np.zeros((5, 5))
        grid[1:3, 3:5] = 0.25
        mf = decode_subpixel(prob_volume(grid))
        np.testing.assert_allclose(mf.offset[0, 0], [-1 + 0.5, 1 + 0.5])
        assert mf.confidence[0, 0] == 1.0

    def test_tie_goes_to_lowest_window(self):
        grid = np.zeros((5, 5))
        grid[0, 0] = grid[4, 4] = 0.5
        mf = decode_subpixel(prob_volume(grid))
        # window (0, 0) holds the top-left mass; its expectation is that cell
        np.testing.assert_allclose(mf.offset[0, 0], [-2, -2])
        assert mf.confidence[0, 0] == 0.5

    def test_origin_added(self):
        grid = embed_distribution(bilinear_distribution((0.25, -0.5)), (0, 0), 5)
        mf = decode_subpixel(prob_volume(grid, origin=(3, -7)))
        np.testing.assert_allclose(mf.offset[0, 0], [3.25, -7.5], atol=1e-12)

    @given(st.floats(-6.99, 5.99), st.floats(-6.99, 5.99))
    @settings(max_examples=300, deadline=None)
    def test_exactness_and_confidence(self, y, x):
        grid = embed_distribution(bilinear_distribution((y, x)), (0, 0), 15)
        mf = decode_subpixel(prob_volume(grid))
        np.testing.assert_allclose(mf.offset[0, 0], [y, x], atol=1e-12)
        assert 0 < mf.confidence[0, 0] <= 1 + 1e-12

    def test_confidence_below_one_when_spread(self):
        grid = np.full((3, 3), 1 / 9)
        mf = decode_subpixel(prob_volume(grid))
        assert mf.confidence[0, 0] == pytest.approx(4 / 9)


class TestUpsample:
    def test_round_half_away(self):
        assert round_half_away(np.array([2.5, -2.5, 0.49, -0.5])).tolist() == [3, -3, 0, -1]

    def test_nearest_neighbour_scaled(self):
        off = np.array([[[0.3125, -0.25], [1.0, 0.5]]])
        mf = MatchField(off, np.ones((1, 2)), np.ones((1, 2), bool))
        org = upsample_origins(mf, (4, 8), (4, 16))
        assert org.shape == (4, 16, 2)
        assert org[0, 0].tolist() == [1, -2]
        assert org[3, 15].tolist() == [4, 4]
        assert block_origins(org, (4, 8)) is not None


class TestCascade:
    def test_self_match(self, scene_images):
        ref, _ = scene_images
        mf = cascade_match(ref, ref, coarse_spec(), refine_spec(), temperature=0.1)
        off = mf.offset[mf.valid]
        assert np.all(np.abs(np.median(off, axis=0)) <= 0.25)

    def test_azimuth_rotation(self, scene_images):
        ref, tgt = scene_images
        # a sharp refine softmax keeps near-equal neighbours from pulling the decode half a cell
        mf = cascade_match(ref, tgt, coarse_spec(), refine_spec(), temperature=0.02, coarse_temperature=0.05)
        dw = mf.offset[..., 1][mf.valid]
        assert np.mean(np.abs(dw - 20) <= 0.5) >= 0.9
        # every final offset stays within the combined search radius
        assert np.abs(mf.offset[..., 0]).max() <= 5 * 4 + 2
        assert np.abs(mf.offset[..., 1]).max() <= 5 * 8 + 2

    def test_azimuth_rotation_coarse_stage(self, scene_images):
        ref, tgt = scene_images
        _, coarse_mf, _ = cascade_match(ref, tgt, coarse_spec(), refine_spec(), temperature=0.1,
                                        return_stages=True, coarse_temperature=0.05)
        # 20 columns is 2.5 coarse columns
        dw = coarse_mf.offset[..., 1][coarse_mf.valid]
        assert np.median(dw) == pytest.approx(2.5, abs=0.25)

    def test_bitwise_repeatable(self, scene_images):
        ref, tgt = scene_images
        a = cascade_match(ref, tgt, coarse_spec(), refine_spec(), temperature=0.1)
        b = cascade_match(ref, tgt, coarse_spec(), refine_spec(), temperature=0.1)
        assert a.offset.tobytes() == b.offset.tobytes()
        assert a.confidence.tobytes() == b.confidence.tobytes()


class TestLoss:
    def pv(self, q):
        return prob_volume(np.asarray(q))

    def test_entropy_floor(self):
        dist = bilinear_distribution((0.3, -0.6))
        target = embed_distribution(dist, (0, 0), 5)
        entropy = -sum(p * math.log(p) for p in dist.probs if p > 0)
        assert subpixel_loss(self.pv(target), [((0, 0), dist)]) == pytest.approx(entropy, abs=1e-12)

    def test_one_hot_against_uniform(self):
        dist = bilinear_distribution((0.0, 0.0))
        assert subpixel_loss(self.pv(np.full((3, 3), 1 / 9)), [((0, 0), dist)]) == pytest.approx(math.log(9))

    def test_monotone_toward_target(self):
        dist = bilinear_distribution((0.4, 0.7))
        target = embed_distribution(dist, (0, 0), 5)
        uniform = np.full((5, 5), 1 / 25)
        losses = [subpixel_loss(self.pv((1 - a) * uniform + a * target), [((0, 0), dist)])
                  for a in np.linspace(0, 1, 21)]
        assert np.all(np.diff(losses) < 0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            subpixel_loss(self.pv(np.full((3, 3), 1 / 9)), [])


class TestGradient:
    def test_zero_at_optimum(self):
        target = embed_distribution(bilinear_distribution((0.3, 0.6)), (0, 0), 3)
        target = 0.9 * target + 0.1 / 9
        np.testing.assert_allclose(loss_grad_logits(np.log(target) + 4.0, target), 0.0, atol=1e-12)

    def test_sums_to_zero(self, rng):
        target = embed_distribution(bilinear_distribution((0.3, -0.6)), (0, 0), 5)
        assert abs(loss_grad_logits(rng.normal(size=(5, 5)), target).sum()) < 1e-12

    def test_finite_differences(self, rng):
        dist = bilinear_distribution(tuple(rng.uniform(-1.9, 0.9, 2)))
        target = embed_distribution(dist, (0, 0), 5)
        s = rng.normal(size=(5, 5))

        def loss(scores):
            sv = SimilarityVolume(scores.reshape(1, 1, 5, 5), np.zeros((1, 1, 2), np.int64), np.ones((1, 1), bool))
            return subpixel_loss(softmax_volume(sv), [((0, 0), dist)])

        fd = np.zeros_like(s)
        for idx in np.ndindex(5, 5):
            e = np.zeros_like(s)
            e[idx] = 1e-5
            fd[idx] = (loss(s + e) - loss(s - e)) / 2e-5
        assert np.abs(fd - loss_grad_logits(s, target)).max() < 1e-6
