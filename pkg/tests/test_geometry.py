import numpy as np
import pytest

from shapereg.errors import DegenerateShape, NoConvergenceWarning
from shapereg.geometry import (LandmarkSet, SimilarityTransform,
                               apply_transform, flatten,
                               generalized_procrustes, procrustes_align,
                               unflatten)


def random_shape(rng, n=12, spread=0.3):
    return (rng.uniform(-spread, spread, (n, 2)) + 0.5).reshape(-1)


def random_transform(rng, max_angle=np.pi):
    return SimilarityTransform(
        scale=rng.uniform(0.5, 2.0),
        rotation=rng.uniform(-max_angle, max_angle),
        translation=rng.uniform(-0.5, 0.5, 2),
    )


class TestLandmarkSet:
    def test_requires_three_points(self):
        with pytest.raises(ValueError):
            LandmarkSet(np.array([[0.0, 0.0], [1.0, 1.0]]))

    def test_rejects_nonfinite(self):
        coords = np.array([[0.0, 0.0], [1.0, 0.0], [np.nan, 1.0]])
        with pytest.raises(ValueError):
            LandmarkSet(coords)

    def test_rejects_nonpositive_spacing(self):
        coords = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(ValueError):
            LandmarkSet(coords, spacing_mm=0.0)


class TestFlatten:
    def test_layout(self):
        ls = LandmarkSet(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
        assert flatten(ls).tolist() == [0.0, 0.0, 1.0, 0.0, 0.0, 1.0]

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        coords = rng.uniform(0, 1, (7, 2))
        valid = np.array([True] * 6 + [False])
        ls = LandmarkSet(coords, valid=valid, spacing_mm=42.0)
        back = unflatten(flatten(ls), spacing_mm=42.0, valid=valid)
        np.testing.assert_array_equal(back.coords, ls.coords)
        np.testing.assert_array_equal(back.valid, ls.valid)
        assert back.spacing_mm == ls.spacing_mm

    def test_nineteen_landmarks_gives_length_38(self):
        rng = np.random.default_rng(1)
        ls = LandmarkSet(rng.uniform(0, 1, (19, 2)))
        assert flatten(ls).size == 38


class TestApplyTransform:
    def test_identity(self):
        rng = np.random.default_rng(2)
        s = random_shape(rng)
        np.testing.assert_array_equal(apply_transform(SimilarityTransform(), s), s)

    def test_pure_scaling(self):
        t = SimilarityTransform(scale=2.0)
        out = apply_transform(t, np.array([1.0, 0.0, 0.0, 1.0, 1.0, 1.0]))
        np.testing.assert_allclose(out, [2.0, 0.0, 0.0, 2.0, 2.0, 2.0])

    def test_unit_rotation(self):
        t = SimilarityTransform(rotation=np.pi / 2)
        out = apply_transform(t, np.array([1.0, 0.0, 0.0, 0.0, 0.0, 1.0]))
        np.testing.assert_allclose(out, [0.0, 1.0, 0.0, 0.0, -1.0, 0.0],
                                   atol=1e-12)

    def test_inverse_composes_to_identity(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            t = random_transform(rng)
            s = random_shape(rng)
            back = apply_transform(t.inverse(), apply_transform(t, s))
            np.testing.assert_allclose(back, s, atol=1e-10)


class TestProcrustesAlign:
    def test_self_alignment_is_identity(self):
        rng = np.random.default_rng(4)
        s = random_shape(rng)
        t = procrustes_align(s, s)
        assert abs(t.scale - 1.0) < 1e-10
        assert abs(t.rotation) < 1e-10
        assert np.abs(t.translation).max() < 1e-10

    def test_recovers_known_transform(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            s = random_shape(rng)
            t0 = random_transform(rng)
            target = apply_transform(t0, s)
            t = procrustes_align(s, target)
            assert abs(t.scale - t0.scale) < 1e-8
            # compare rotations on the circle
            dr = (t.rotation - t0.rotation + np.pi) % (2 * np.pi) - np.pi
            assert abs(dr) < 1e-8
            assert np.abs(t.translation - t0.translation).max() < 1e-8

    def test_transform_recovery_acts_on_shape(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            s = random_shape(rng)
            t0 = random_transform(rng)
            target = apply_transform(t0, s)
            t = procrustes_align(s, target)
            np.testing.assert_allclose(apply_transform(t, s), target, atol=1e-8)

    def test_masked_landmark_excluded_from_residual(self):
        rng = np.random.default_rng(7)
        s = random_shape(rng, n=8)
        t0 = random_transform(rng)
        target = apply_transform(t0, s)
        # corrupt one landmark of the target, then mask it out
        target = target.copy()
        target[4:6] += 0.7
        mask = np.ones(8, dtype=bool)
        mask[2] = False
        t_masked = procrustes_align(s, target, mask)
        # oracle: align the explicitly reduced point sets
        keep = np.repeat(mask, 2)
        t_reduced = procrustes_align(s[keep], target[keep])
        assert abs(t_masked.scale - t_reduced.scale) < 1e-12
        assert abs(t_masked.rotation - t_reduced.rotation) < 1e-12
        np.testing.assert_allclose(t_masked.translation, t_reduced.translation,
                                   atol=1e-12)

    def test_pre_translation_invariance(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            s = random_shape(rng)
            target = apply_transform(random_transform(rng), s)
            shift = SimilarityTransform(translation=rng.uniform(-1, 1, 2))
            shifted = apply_transform(shift, s)
            t_direct = procrustes_align(s, target)
            t_shifted = procrustes_align(shifted, target)
            np.testing.assert_allclose(
                apply_transform(t_shifted, shifted),
                apply_transform(t_direct, s), atol=1e-9)

    def test_coincident_points_raise(self):
        s = np.tile([0.5, 0.5], 4)
        target = np.arange(8.0)
        with pytest.raises(DegenerateShape):
            procrustes_align(s, target)

    def test_collinear_points_raise(self):
        s = np.array([0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0])
        target = np.arange(8.0)
        with pytest.raises(DegenerateShape):
            procrustes_align(s, target)

    def test_too_few_valid_landmarks(self):
        rng = np.random.default_rng(9)
        s = random_shape(rng, n=5)
        mask = np.array([True, True, False, False, False])
        with pytest.raises(ValueError):
            procrustes_align(s, s, mask)


class TestGeneralizedProcrustes:
    def test_identical_shapes(self):
        rng = np.random.default_rng(10)
        s = random_shape(rng)
        mean, aligned = generalized_procrustes([s.copy(), s.copy()])
        pts = s.reshape(-1, 2) - s.reshape(-1, 2).mean(axis=0)
        expected = pts.reshape(-1) / np.linalg.norm(pts)
        np.testing.assert_allclose(mean, expected, atol=1e-10)
        for a in aligned:
            assert np.abs(a - mean).max() < 1e-10

    def test_similarity_orbit_aligns_exactly(self):
        rng = np.random.default_rng(11)
        base = random_shape(rng)
        shapes = [apply_transform(random_transform(rng, max_angle=0.4), base)
                  for _ in range(12)]
        mean, aligned = generalized_procrustes(shapes)
        for a in aligned:
            assert np.linalg.norm(a - mean) < 1e-8

    def test_mean_normalization(self):
        rng = np.random.default_rng(12)
        shapes = [random_shape(rng) for _ in range(10)]
        mean, _ = generalized_procrustes(shapes)
        centroid = mean.reshape(-1, 2).mean(axis=0)
        assert np.abs(centroid).max() < 1e-12
        assert abs(np.linalg.norm(mean) - 1.0) < 1e-12

    def test_permutation_invariance(self):
        rng = np.random.default_rng(13)
        base = random_shape(rng)
        shapes = [base + rng.normal(0, 0.01, base.size) for _ in range(9)]
        mean_a, _ = generalized_procrustes(list(shapes))
        mean_b, _ = generalized_procrustes(list(reversed(shapes)))
        assert np.abs(mean_a - mean_b).max() < 1e-9

    def test_iteration_cap_warns(self):
        rng = np.random.default_rng(14)
        shapes = [random_shape(rng) for _ in range(6)]
        with pytest.warns(NoConvergenceWarning):
            generalized_procrustes(shapes, tol=0.0, max_iter=2)

    def test_needs_two_shapes(self):
        rng = np.random.default_rng(15)
        with pytest.raises(ValueError):
            generalized_procrustes([random_shape(rng)])
