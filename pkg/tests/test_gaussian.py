import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from causalpref.gaussian import (
    DeltaModel,
    accuracy_under_shift,
    alpha_nll,
    alpha_replications,
    arcsin_table,
    fit_alpha,
    golden_section,
    label_delta,
    label_deltas,
    opposite_sign_probability,
    quadrants,
    sample_deltas,
    simulate_delta,
)

rhos = st.floats(-0.99, 0.99)


def orthant_oracle(rho):
    # 1 - 2 P(d1 < 0, d2 < 0) by numerical integration of the bivariate normal
    return 1.0 - 2.0 * float(multivariate_normal(mean=[0, 0], cov=[[1, rho], [rho, 1]]).cdf([0, 0]))


class TestClosedForm:
    def test_independent(self):
        assert opposite_sign_probability(0.0) == 0.5

    def test_near_perfect_correlation(self):
        assert opposite_sign_probability(0.9999) < 0.01

    def test_high_correlation_value(self):
        assert opposite_sign_probability(0.9) == pytest.approx(0.5 - math.asin(0.9) / math.pi, abs=1e-15)
        assert opposite_sign_probability(0.9) == pytest.approx(0.1436, abs=1e-4)

    @pytest.mark.parametrize("rho", [-0.9, -0.5, 0.1, 0.6, 0.95])
    def test_matches_numerical_integration(self, rho):
        assert opposite_sign_probability(rho) == pytest.approx(orthant_oracle(rho), abs=1e-5)

    @pytest.mark.parametrize("rho", [1.0, -1.0, 1.5])
    def test_degenerate_rejected(self, rho):
        with pytest.raises(ValueError):
            opposite_sign_probability(rho)
        with pytest.raises(ValueError):
            DeltaModel(rho)

    @given(rhos)
    def test_odd_symmetry(self, rho):
        assert opposite_sign_probability(rho) + opposite_sign_probability(-rho) == pytest.approx(1.0, abs=1e-15)

    @given(rhos, rhos)
    def test_strictly_decreasing(self, a, b):
        if a < b:
            assert opposite_sign_probability(a) > opposite_sign_probability(b)

    def test_boundary_slope(self):
        assert DeltaModel(0.0, 0.25).boundary_slope == pytest.approx(-1 / 3)
        assert DeltaModel(0.0, 1.0).boundary_slope == -math.inf


class TestMonteCarlo:
    def test_quadrants_balanced_when_independent(self):
        s = simulate_delta(DeltaModel(0.0), 1_000_000, seed=0)
        assert all(0.248 < m < 0.252 for m in s.quadrant_mass.values())

    def test_opposite_sign_mass(self):
        s = simulate_delta(DeltaModel(0.9), 1_000_000, seed=1)
        assert abs(s.opposite_sign_mass - 0.1436) < 0.001

    def test_empirical_correlation(self):
        d = sample_deltas(0.6, 1_000_000, np.random.default_rng(2))
        assert abs(np.corrcoef(d[:, 0], d[:, 1])[0, 1] - 0.6) < 0.005

    def test_within_three_standard_errors_in_most_trials(self):
        n = 20_000
        hits = 0
        for trial in range(100):
            rho = -0.9 + 1.8 * (trial % 10) / 9
            closed = opposite_sign_probability(rho)
            mc = simulate_delta(DeltaModel(rho), n, seed=trial).opposite_sign_mass
            hits += abs(mc - closed) <= 3 * math.sqrt(closed * (1 - closed) / n)
        assert hits >= 95

    def test_quadrant_numbering(self):
        pts = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])
        np.testing.assert_array_equal(quadrants(pts), [1, 2, 3, 4])

    def test_n_must_be_positive(self):
        with pytest.raises(ValueError):
            simulate_delta(DeltaModel(0.0), 0)


class TestLabels:
    def test_first_quadrant_always_first(self):
        rng = np.random.default_rng(0)
        for alpha in (0.0, 0.25, 0.5, 1.0):
            assert label_delta((1.0, 1.0), alpha, rng) == 0

    def test_linear_rule(self):
        # 0.25 * 1 + 0.75 * (-0.4) = -0.05
        assert label_delta((1.0, -0.4), 0.25, np.random.default_rng(0)) == 1

    def test_zero_weight_uses_second_coordinate(self):
        d = sample_deltas(0.3, 1_000, np.random.default_rng(1))
        np.testing.assert_array_equal(label_deltas(d, 0.0, np.random.default_rng(0)), (d[:, 1] < 0).astype(int))

    def test_vector_matches_scalar(self):
        d = sample_deltas(0.3, 50, np.random.default_rng(1))
        vec = label_deltas(d, 0.4, np.random.default_rng(0))
        one = [label_delta(row, 0.4, np.random.default_rng(0)) for row in d]
        np.testing.assert_array_equal(vec, one)

    def test_weight_bounds(self):
        with pytest.raises(ValueError):
            label_delta((1.0, 0.0), 1.2, np.random.default_rng(0))


class TestFit:
    def test_consistency(self):
        rng = np.random.default_rng(3)
        d = sample_deltas(0.0, 50_000, rng)
        assert 0.23 < fit_alpha(d, label_deltas(d, 0.25, rng)) < 0.27

    def test_boundary_recovery(self):
        rng = np.random.default_rng(4)
        d = sample_deltas(0.3, 5_000, rng)
        assert fit_alpha(d, label_deltas(d, 0.0, rng)) < 0.05

    def test_identical_labels_rejected(self):
        with pytest.raises(ValueError):
            fit_alpha(np.ones((5, 2)), np.zeros(5))
        with pytest.raises(ValueError):
            fit_alpha(np.ones((0, 2)), np.zeros(0))

    def test_variance_grows_with_correlation(self):
        low = alpha_replications(0.0, 0.25, 5_000, 50, seed=0)
        high = alpha_replications(0.9, 0.25, 5_000, 50, seed=0)
        assert high.var(ddof=1) > low.var(ddof=1)

    @given(st.integers(0, 10_000), st.floats(-0.9, 0.9), st.floats(0.05, 0.95))
    def test_objective_unimodal_on_grid(self, seed, rho, alpha):
        rng = np.random.default_rng(seed)
        d = sample_deltas(rho, 300, rng)
        labels = label_deltas(d, alpha, rng)
        grid = np.linspace(0.0, 1.0, 1001)
        values = np.array([alpha_nll(a, d, labels) for a in grid])
        steps = np.sign(np.diff(values))
        steps = steps[steps != 0]
        # at most one switch from descending to ascending
        assert np.sum(np.diff(steps) > 0) <= 1

    def test_golden_section_on_quadratic(self):
        assert golden_section(lambda x: (x - 0.3) ** 2, 0.0, 1.0) == pytest.approx(0.3, abs=1e-6)
        assert golden_section(lambda x: x, 0.0, 1.0) == 0.0


class TestShift:
    def test_matched_rule_is_exact(self):
        assert 0.995 < accuracy_under_shift(0.25, 0.25, -0.5, 100_000, seed=0).accuracy <= 1.0

    @pytest.mark.parametrize("alpha_hat", [0.1, 0.4, 0.8])
    def test_errors_only_in_opposite_sign_quadrants(self, alpha_hat):
        res = accuracy_under_shift(alpha_hat, 0.25, 0.0, 50_000, seed=1)
        assert res.errors_by_quadrant[1] == 0 and res.errors_by_quadrant[3] == 0
        assert res.errors_by_quadrant[2] + res.errors_by_quadrant[4] > 0

    def test_negative_correlation_hurts_more(self):
        neg = accuracy_under_shift(0.4, 0.25, -0.8, 100_000, seed=2).accuracy
        pos = accuracy_under_shift(0.4, 0.25, 0.8, 100_000, seed=2).accuracy
        assert 1 - neg > 1 - pos


class TestTable:
    def test_rows(self):
        rows = arcsin_table([0.0, 0.5], n=20_000, reps=3, fit_n=500)
        assert [r["rho"] for r in rows] == [0.0, 0.5]
        for r in rows:
            assert r["closed_form"] == opposite_sign_probability(r["rho"])
            assert abs(r["z_score"]) < 4
            assert 0.0 <= r["alpha_hat_mean"] <= 1.0
