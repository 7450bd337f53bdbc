import numpy as np
import pytest

from shapereg.geometry import LandmarkSet, flatten, unflatten
from shapereg.regulation import (DEFAULT_Z_MM, Branch, clamp_coefficients,
                                 regulate)
from shapereg.shape_model import build_shape_model, project, reconstruct
from shapereg.synth import GeneratorSpec, corrupt_predictions, generate


@pytest.fixture(scope="module")
def fixture():
    spec = GeneratorSpec(seed=31)
    samples = generate(spec, 200)
    sets = [ls for _, ls in samples]
    model = build_shape_model(sets[:150])
    return spec, sets, model


def regulate_oracle(model, initial, z_mm):
    """Straight-line re-statement of the clamp and the two branch rules."""
    x_alpha = flatten(initial)
    b = project(model, x_alpha)
    clamped = np.array([min(max(e, -3.0 * s), 3.0 * s)
                        for e, s in zip(b.values, model.sigmas)])
    x_beta = reconstruct(model, b.with_values(clamped))
    diff = x_beta.reshape(-1, 2) - x_alpha.reshape(-1, 2)
    d_mm = np.sqrt((diff ** 2).sum(axis=1)) * initial.spacing_mm
    if np.all(d_mm <= z_mm):
        return Branch.ADJUSTED, x_beta.reshape(-1, 2), np.ones(len(d_mm), bool)
    return Branch.RAW_WITH_EXCLUSIONS, x_alpha.reshape(-1, 2), d_mm <= z_mm


class TestClamp:
    def test_inside_box_unchanged(self, fixture):
        _, sets, model = fixture
        coeffs = project(model, flatten(sets[0]))
        inside = coeffs.with_values(2.0 * model.sigmas)
        out = clamp_coefficients(model, inside)
        np.testing.assert_array_equal(out.values, inside.values)

    def test_overflow_clamps_to_three_sigma(self, fixture):
        _, sets, model = fixture
        coeffs = project(model, flatten(sets[0]))
        values = np.zeros(model.n_modes)
        values[0] = 5.0 * model.sigmas[0]
        out = clamp_coefficients(model, coeffs.with_values(values))
        assert out.values[0] == 3.0 * model.sigmas[0]

    def test_boundary_is_fixed_point(self, fixture):
        _, sets, model = fixture
        coeffs = project(model, flatten(sets[0]))
        values = -3.0 * model.sigmas
        out = clamp_coefficients(model, coeffs.with_values(values))
        np.testing.assert_array_equal(out.values, values)

    def test_containment_property(self, fixture):
        _, sets, model = fixture
        rng = np.random.default_rng(0)
        coeffs = project(model, flatten(sets[0]))
        for _ in range(500):
            raw = rng.standard_normal(model.n_modes) * model.sigmas * 10
            out = clamp_coefficients(model, coeffs.with_values(raw)).values
            assert np.all(out >= -3.0 * model.sigmas)
            assert np.all(out <= 3.0 * model.sigmas)
            # piecewise: values already in the box are untouched
            inside = np.abs(raw) < 3.0 * model.sigmas
            np.testing.assert_array_equal(out[inside], raw[inside])


class TestRegulate:
    def test_default_threshold_is_two_mm(self):
        assert DEFAULT_Z_MM == 2.0

    def test_in_model_shape_adjusted_with_zero_deviation(self, fixture):
        _, sets, model = fixture
        rng = np.random.default_rng(1)
        coeffs = project(model, flatten(sets[0]))
        b = rng.uniform(-2, 2, model.n_modes) * model.sigmas
        shape = reconstruct(model, coeffs.with_values(b))
        initial = unflatten(shape, spacing_mm=sets[0].spacing_mm)
        label = regulate(model, initial)
        assert label.branch is Branch.ADJUSTED
        assert label.valid.all()
        assert label.max_deviation_mm < 1e-8
        np.testing.assert_allclose(label.coords, initial.coords, atol=1e-12)

    def test_single_outlier_flagged(self, fixture):
        _, sets, model = fixture
        rng = np.random.default_rng(2)
        coeffs = project(model, flatten(sets[0]))
        b = rng.uniform(-1, 1, model.n_modes) * model.sigmas
        shape = reconstruct(model, coeffs.with_values(b))
        coords = shape.reshape(-1, 2).copy()
        displacement = 10.0 * DEFAULT_Z_MM / sets[0].spacing_mm
        coords[4] += displacement / np.sqrt(2)
        initial = LandmarkSet(coords, spacing_mm=sets[0].spacing_mm)
        label = regulate(model, initial)
        assert label.branch is Branch.RAW_WITH_EXCLUSIONS
        assert not label.valid[4]
        np.testing.assert_array_equal(label.coords, coords)
        branch, oracle_coords, oracle_valid = regulate_oracle(
            model, initial, DEFAULT_Z_MM)
        assert label.branch is branch
        np.testing.assert_array_equal(label.valid, oracle_valid)

    def test_idempotent_on_adjusted_branch(self, fixture):
        _, sets, model = fixture
        rng = np.random.default_rng(3)
        for i in range(5):
            noisy = corrupt_predictions(sets[i], 0.003, 0.0, 0.0, rng)
            first = regulate(model, noisy)
            if first.branch is not Branch.ADJUSTED:
                continue
            again = regulate(model, LandmarkSet(
                first.coords, spacing_mm=noisy.spacing_mm))
            assert again.branch is Branch.ADJUSTED
            assert again.max_deviation_mm < 1e-9

    def test_matches_oracle_on_corrupted_predictions(self, fixture):
        _, sets, model = fixture
        rng = np.random.default_rng(4)
        for i in range(60):
            truth = sets[i % len(sets)]
            noisy = corrupt_predictions(truth, 0.01, 0.3, 8.0, rng)
            label = regulate(model, noisy)
            branch, coords, valid = regulate_oracle(model, noisy, DEFAULT_Z_MM)
            assert label.branch is branch
            np.testing.assert_array_equal(label.valid, valid)
            np.testing.assert_array_equal(label.coords, coords)

    def test_exclusion_soundness_and_dichotomy(self, fixture):
        _, sets, model = fixture
        rng = np.random.default_rng(5)
        for i in range(40):
            noisy = corrupt_predictions(sets[i % len(sets)], 0.02, 0.2, 6.0, rng)
            label = regulate(model, noisy)
            if label.branch is Branch.ADJUSTED:
                assert label.valid.all()
                assert label.max_deviation_mm <= DEFAULT_Z_MM
            else:
                assert not label.valid.all()
                assert np.all(label.deviations_mm[~label.valid] > DEFAULT_Z_MM)
                assert np.all(label.deviations_mm[label.valid] <= DEFAULT_Z_MM)

    def test_all_landmarks_excluded(self, fixture):
        _, sets, model = fixture
        rng = np.random.default_rng(6)
        wrecked = corrupt_predictions(sets[0], 0.0, 1.0,
                                      10.0 * DEFAULT_Z_MM, rng)
        label = regulate(model, wrecked)
        assert label.branch is Branch.RAW_WITH_EXCLUSIONS
        assert label.n_valid == 0

    def test_small_jitter_stays_adjusted(self, fixture):
        _, sets, model = fixture
        rng = np.random.default_rng(7)
        jitter = 0.2 * DEFAULT_Z_MM / sets[0].spacing_mm
        adjusted = 0
        for i in range(100):
            noisy = corrupt_predictions(sets[i % len(sets)], jitter, 0.0,
                                        0.0, rng)
            if regulate(model, noisy).branch is Branch.ADJUSTED:
                adjusted += 1
        assert adjusted >= 95

    def test_rejects_bad_threshold(self, fixture):
        _, sets, model = fixture
        with pytest.raises(ValueError):
            regulate(model, sets[0], z_mm=0.0)
