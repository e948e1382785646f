import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from vfboost.errors import CalibrationError, NumericError
from vfboost.privacy import (CalibratedParams, PrivacyConfig, advanced_epsilon,
                             ap_sensitivity_budget, budget_schedule,
                             calibrate, calibrate_C, calibrate_ratio,
                             calibrate_sigma2, circulant_logdet, compose,
                             compose_parallel, cycle_covariance, det_ratio,
                             mu_logistic, pp_abc, pp_delta, pp_delta_at_ratio,
                             pp_k_eigs, pp_matrix, sensitivity_sum,
                             split_budget, utility_bound, utility_kappa)


def budget_oracle(eps, delta):
    """Unrationalized budget formula at 50 significant digits."""
    with mpmath.workdps(50):
        L = mpmath.log(delta)
        return float(2 * (eps - 2 * L - 2 * mpmath.sqrt(L * (L - eps))))


def gaussian_tail(eps, variance):
    """Pr(z >= eps - variance / 2) for z ~ N(0, variance)."""
    return float(stats.norm.sf((eps - variance / 2) / math.sqrt(variance)))


class TestMu:

    def test_value(self):
        assert mu_logistic() == pytest.approx(1.4621171572600098, rel=1e-15)

    def test_bounds_derivatives(self):
        assert mu_logistic() / 2 == pytest.approx(math.e / (math.e + 1))
        assert mu_logistic() / 2 >= 0.25


class TestSensitivityBudget:

    def test_reference_point(self):
        value = ap_sensitivity_budget(1.0, 1e-3)
        assert value == pytest.approx(budget_oracle(1.0, 1e-3), rel=1e-12)
        assert value == pytest.approx(0.0675739, abs=1e-7)
        assert gaussian_tail(1.0, value) <= 1e-3

    @pytest.mark.parametrize("eps", [0.1, 0.5, 1, 2, 4, 8])
    @pytest.mark.parametrize("delta", [1e-6, 1e-4, 1e-2, 0.1])
    def test_grid_positive_and_matches_oracle(self, eps, delta):
        value = ap_sensitivity_budget(eps, delta)
        assert value > 0
        assert value == pytest.approx(budget_oracle(eps, delta), rel=1e-10)
        assert gaussian_tail(eps, value) <= delta

    def test_limit_delta_to_one(self):
        values = [ap_sensitivity_budget(1.0, 1 - 10.0**-k) for k in (2, 4, 8)]
        assert values[0] < values[1] < values[2] < 2.0
        assert values[2] == pytest.approx(2.0, rel=1e-3)

    @pytest.mark.parametrize("eps, delta", [(0, 0.1), (1, 0), (1, 1), (-1, 0.5)])
    def test_domain(self, eps, delta):
        with pytest.raises(ValueError):
            ap_sensitivity_budget(eps, delta)


class TestCalibrateC:

    def test_pure_inactive(self):
        mu = mu_logistic()
        C = calibrate_C(1.0, 1e-3, 0, 40, mu, 1.0, 2.0)
        assert C == pytest.approx(40 * mu**2 / (6.0 * ap_sensitivity_budget(
            1.0, 1e-3)), rel=1e-12)

    def test_linear_in_counts(self):
        mu = mu_logistic()
        a = calibrate_C(2.0, 1e-4, 7, 13, mu, 1.0, 0.5)
        b = calibrate_C(2.0, 1e-4, 14, 26, mu, 1.0, 0.5)
        assert b == pytest.approx(2 * a, rel=1e-12)

    def test_reference_point(self):
        mu = 1.4621
        C = calibrate_C(1.0, 0.001, 50, 50, mu, 1.0, 1.0)
        lhs = 50 * mu**2 / (3 * C) + 50 * mu**2 / C
        assert lhs == pytest.approx(ap_sensitivity_budget(1.0, 0.001), rel=1e-12)
        assert gaussian_tail(1.0, lhs) <= 0.001

    def test_smaller_radius_violates(self):
        mu = mu_logistic()
        C = calibrate_C(1.0, 1e-3, 5, 5, mu, 1.0, 1.0)
        budget = ap_sensitivity_budget(1.0, 1e-3)
        assert sensitivity_sum(5, 5, mu, 1.0, 1.0) / (0.99 * C) > budget

    def test_vectorized(self):
        mu = mu_logistic()
        out = calibrate_C(1.0, 1e-3, np.array([1, 2]), np.array([3, 4]), mu, 1.0,
                          1.0)
        assert out.shape == (2,)
        assert out[1] == pytest.approx(calibrate_C(1.0, 1e-3, 2, 4, mu, 1.0, 1.0))

    def test_zero_sigma2(self):
        with pytest.raises(CalibrationError):
            calibrate_C(1.0, 1e-3, 1, 1, 1.0, 1.0, 0.0)


class TestCirculantSums:

    def test_four_point_hand_sum(self):
        a, b, c = pp_abc(0.5, 4)
        assert a == pytest.approx(7 / 15, rel=1e-14)
        # cos terms: j=0..3 -> 1, 0, -1, 0 and cos 2theta -> 1, -1, 1, -1.
        assert b == pytest.approx((1 - 1 / 5) / 4, rel=1e-14)
        assert c == pytest.approx((1 - 1 / 3 + 1 / 5 - 1 / 3) / 4, rel=1e-14)

    def test_vanishes_for_large_ratio(self):
        a, b, c = pp_abc(1e12, 10)
        assert max(abs(a), abs(b), abs(c)) < 1e-12

    @pytest.mark.parametrize("r", [0.01, 0.5, 3.0])
    def test_riemann_limit(self, r):
        big = pp_abc(r, 10**4)
        small = pp_abc(r, 10**3)
        for order, (x, y) in enumerate(zip(big, small)):
            integral, _ = integrate.quad(
                lambda t: math.cos(order * t) / (2 * (1 - math.cos(t)) + 2 * r),
                0, 2 * math.pi, limit=200)
            assert x == pytest.approx(integral / (2 * math.pi), rel=1e-6,
                                      abs=1e-9)
            assert abs(x - y) < 1e-4

    @given(st.floats(1e-4, 1e4), st.integers(3, 200))
    def test_ordering(self, r, n):
        a, b, c = pp_abc(r, n)
        assert -a - 1e-12 <= b <= a + 1e-12
        assert abs(c) <= a + 1e-12

    def test_domain(self):
        with pytest.raises(ValueError):
            pp_abc(0.0, 5)
        with pytest.raises(ValueError):
            pp_abc(1.0, 2)


class TestEigenvalues:

    def test_zero(self):
        assert pp_k_eigs(0, 0, 0) == (0, 0, 0)

    def test_a_equals_c(self):
        k1, k2, k3 = pp_k_eigs(0.3, 0.1, 0.3)
        assert k2 == 0 and k1 + k3 == pytest.approx(4 * 0.1 - 0.6)

    @settings(max_examples=200)
    @given(st.floats(1e-5, 1e5), st.integers(3, 500))
    def test_dense_solver_and_eigenvector(self, r, n):
        a, b, c = pp_abc(r, n)
        k1, k2, k3 = pp_k_eigs(a, b, c)
        mat = pp_matrix(a, b, c)
        dense = np.sort(np.linalg.eigvals(mat).real)
        scale = max(1.0, abs(a))
        np.testing.assert_allclose(np.sort([k1, k2, k3]), dense, atol=1e-9 * scale)
        assert k2 == a - c
        # The eigenvector of a - c is (1, 0, -1) / sqrt 2.
        v = np.array([1.0, 0.0, -1.0]) / math.sqrt(2)
        assert np.linalg.norm(mat @ v - k2 * v) <= 1e-9 * scale

    def test_negative_discriminant(self):
        with pytest.raises(NumericError):
            pp_k_eigs(1.0, 0.0, -5.0)


class TestPPDelta:

    def test_zero_eigenvalues(self):
        est = pp_delta(1.0, 1, (0, 0, 0), samples=10**5)
        assert est.value == 0 and est.conservative == 0

    def test_chi_square_oracle(self):
        est = pp_delta(2.0, 1, (1, 1, 1), samples=10**6)
        expected = stats.chi2.sf(4 - 2 * math.log(2), 3)
        assert abs(est.value - expected) <= 3 * est.stderr

    def test_scaled_by_W(self):
        est = pp_delta(3.0, 2, (1, 1, 1), samples=10**5)
        expected = 2 * stats.chi2.sf(3.0 - 2 * math.log(2), 3)
        assert abs(est.value - expected) <= 3 * est.stderr

    def test_monotone_in_epsilon(self):
        k = pp_k_eigs(*pp_abc(0.2, 50))
        values = [pp_delta(e, 1, k, samples=10**5).value
                  for e in np.linspace(0.8, 6, 12)]
        assert all(b <= a for a, b in zip(values, values[1:]))

    def test_preconditions(self):
        with pytest.raises(ValueError):
            pp_delta(0.5, 1, (1, 1, 1))
        with pytest.raises(ValueError):
            pp_delta(2.0, 1, (1, 1, 1), samples=1000)

    def test_deterministic(self):
        a = pp_delta_at_ratio(1.0, 1, 0.3, 40, samples=10**5, seed=4)
        b = pp_delta_at_ratio(1.0, 1, 0.3, 40, samples=10**5, seed=4)
        assert a == b


class TestSigma2Calibration:

    def test_loose_budget_lower_edge(self):
        r, est = calibrate_ratio(50.0, 0.99, 1, 100, samples=10**5)
        assert r == pytest.approx(1e-6, rel=1e-12) and est.conservative <= 0.99

    def test_self_consistent(self):
        # W = 3 would need eps_pp > 3 ln 2; W = 1 is the feasible setting at
        # eps_pp = 1 and delta_pp = 1/n.
        n = 1000
        sigma2 = calibrate_sigma2(1.0, 1 / n, 1, n, 1.0, samples=10**6)
        r = sigma2**2 / 2
        again = pp_delta_at_ratio(1.0, 1, r, n, samples=10**6)
        assert again.conservative <= 1 / n
        assert pp_delta_at_ratio(1.0, 1, r * 0.9, n).conservative > 1 / n

    def test_feasible_with_three_columns(self):
        sigma2 = calibrate_sigma2(3.0, 1e-3, 3, 1000, 1.0, samples=10**5)
        assert sigma2 > 0

    def test_halving_delta_never_decreases_sigma2(self):
        values = [calibrate_sigma2(1.0, d, 1, 200, 1.0, samples=10**5)
                  for d in (0.02, 0.01, 0.005, 0.0025)]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_infeasible(self):
        with pytest.raises(ValueError):
            calibrate_sigma2(0.5, 0.1, 1, 10, 1.0)
        with pytest.raises(ValueError):
            calibrate_ratio(2.0, 1.0, 1, 10)


class TestDeterminants:

    def test_cycle_covariance_degenerate(self):
        np.testing.assert_array_equal(cycle_covariance(1, 1.0, 2.0), [[4.0]])
        np.testing.assert_array_equal(cycle_covariance(2, 1.0, 2.0),
                                      [[6.0, -2.0], [-2.0, 6.0]])

    @pytest.mark.parametrize("n", [3, 4, 10, 31])
    def test_circulant_spectrum(self, n):
        _, dense = np.linalg.slogdet(cycle_covariance(n, 1.3, 0.7))
        assert circulant_logdet(n, 1.3, 0.7) == pytest.approx(dense, rel=1e-10)

    def test_sigma1_zero(self):
        assert det_ratio(5, 0.0, 1.0) == pytest.approx(1.0, rel=1e-12)

    def test_three_instances(self):
        full = cycle_covariance(3, 1.0, 1.0)
        split = np.diag([3.0, 0.0, 0.0])
        split[1:, 1:] = [[3.0, -2.0], [-2.0, 3.0]]
        expected = np.linalg.det(full) / np.linalg.det(split)
        value = det_ratio(3, 1.0, 1.0)
        assert value == pytest.approx(expected, rel=1e-12)
        assert 0.25 < value < 2

    def test_domain(self):
        with pytest.raises(ValueError):
            det_ratio(2, 1.0, 1.0)
        with pytest.raises(ValueError):
            det_ratio(5, 1.0, 0.0)


class TestComposition:

    def test_basic(self):
        assert compose([(1, 1e-3)] * 2) == (2, 2e-3)

    def test_advanced_single(self):
        eps, delta = compose([(1.0, 0.0)], "advanced", 1e-6)
        assert eps == pytest.approx(math.sqrt(2 * math.log(1e6)) + math.e - 1)
        assert abs(eps - 6.9748) < 1e-3
        assert delta == 1e-6

    def test_parallel(self):
        assert compose_parallel([(1, 1e-3), (2, 1e-4)]) == (2, 1e-3)
        assert compose_parallel([]) == (0.0, 0.0)

    def test_errors(self):
        with pytest.raises(ValueError):
            compose([(1, 0), (2, 0)], "advanced", 1e-6)
        with pytest.raises(ValueError):
            compose([(1, 0)], "advanced", 0.0)
        with pytest.raises(ValueError):
            compose([(1, 0)], "renyi")
        with pytest.raises(ValueError):
            compose([(-1, 0)])

    def test_single_query_basic_schedule(self):
        config = PrivacyConfig(1.5, 1e-3, 1.0, 1e-2, rounds=1, max_depth=1,
                               composition="basic")
        schedule = budget_schedule(config)
        assert (schedule.ap.eps, schedule.ap.delta) == (1.5, 1e-3)

    @pytest.mark.parametrize("mode", ["basic", "advanced"])
    def test_round_trip_grid(self, mode):
        for T in (1, 2, 5, 20, 60):
            for depth in range(1, 7):
                config = PrivacyConfig(2.0, 1e-3, 1.0, 1e-2, rounds=T,
                                       max_depth=depth, composition=mode)
                s = budget_schedule(config)
                eps, delta = compose([(s.ap.eps, s.ap.delta)] * s.k, mode,
                                     s.delta_prime or None)
                assert eps <= 2.0 and delta <= 1e-3

    def test_advanced_beats_basic_at_60(self):
        query, delta_prime = split_budget(4.0, 1e-3, 60, "advanced")
        assert query.eps > 4.0 / 60
        assert delta_prime == 5e-4
        assert query.delta == pytest.approx(1e-3 / 120)

    def test_composed_pp_accounting(self):
        config = PrivacyConfig(1.0, 1e-3, 1.0, 1e-2, rounds=20, max_depth=4,
                               pp_accounting="composed")
        with pytest.raises(CalibrationError):
            budget_schedule(config)
        loose = PrivacyConfig(1.0, 1e-3, 400.0, 1e-2, rounds=2, max_depth=2,
                              pp_accounting="composed")
        assert budget_schedule(loose).pp.eps > math.log(2)

    def test_releases_per_node(self):
        config = PrivacyConfig(1.0, 1e-3, 1.0, 1e-2, rounds=2, max_depth=3)
        assert budget_schedule(config, releases_per_node=4).k == 24

    @pytest.mark.parametrize("kwargs", [
        dict(eps_ap=0.0), dict(delta_ap=1.0), dict(delta_pp=0.0),
        dict(W=0), dict(eps_pp=0.6), dict(W=2, eps_pp=1.3),
        dict(composition="x"), dict(pp_accounting="x")])
    def test_config_validation(self, kwargs):
        base = dict(eps_ap=1.0, delta_ap=1e-3, eps_pp=1.0, delta_pp=1e-2)
        base.update(kwargs)
        with pytest.raises(ValueError):
            PrivacyConfig(**base)


class TestCalibrate:

    def test_document(self):
        config = PrivacyConfig(1.0, 1e-3, 1.0, 1e-2, rounds=5, max_depth=3)
        params = calibrate(config, 100, samples=10**5)
        doc = params.to_dict()
        assert {"sigma1", "sigma2", "C_formula_inputs", "W", "per_query",
                "accountant"} <= set(doc)
        assert doc["accountant"]["k"] == 15
        assert doc["pp_delta_estimate"] <= 1e-2
        C = params.C_for(np.array([30]), np.array([70]))[0]
        assert C == pytest.approx(calibrate_C(params.ap.eps, params.ap.delta, 30,
                                              70, params.mu, 1.0, params.sigma2))
        assert params.noise_ratio == pytest.approx(params.sigma2**2 / 2)

    def test_unaccounted(self):
        params = CalibratedParams.unaccounted(1.0, 0.0, 4.0)
        assert not params.accounting and params.max_units is None
        np.testing.assert_array_equal(params.C_for(np.array([1, 2]),
                                                   np.array([3, 4])), [4.0, 4.0])
        assert params.to_dict()["per_query"] is None


def simulate_deviation(alpha, kappa, gl, hl, gr, hr, lam, sims, seed):
    """Pr(|noised score - score| >= alpha) with every child sum perturbed by an
    independent N(0, kappa^2); non-positive noised denominators count as
    deviations."""
    gen = np.random.default_rng(seed)
    z = gen.standard_normal((4, sims)) * kappa
    gl_n, hl_n, gr_n, hr_n = gl + z[0], hl + lam + z[1], gr + z[2], hr + lam + z[3]
    ok = (hl_n > 0) & (hr_n > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        noised = 0.5 * (gl_n**2 / hl_n + gr_n**2 / hr_n)
    exact = 0.5 * (gl**2 / (hl + lam) + gr**2 / (hr + lam))
    hit = ~ok | (np.abs(noised - exact) >= alpha)
    p = hit.mean()
    return p, math.sqrt(max(p * (1 - p), 1 / sims) / sims)


class TestUtilityBound:

    def test_reference_point(self):
        value = utility_bound(0.3, 0.1, 1, 1, 1, 1, 1)
        p, se = simulate_deviation(0.3, 0.1, 1, 1, 1, 1, 1, 10**5, 0)
        assert value >= p - 3 * se
        assert value == pytest.approx(0.012019, abs=2e-6)

    def test_vanishes_as_kappa_shrinks(self):
        values = [utility_bound(0.3, k, 1, 1, 1, 1, 1) for k in (0.1, 0.01, 1e-4)]
        assert values[0] > values[1] >= values[2]
        assert values[2] < 1e-3

    def test_large_kappa_tail_term(self):
        # For kappa >> mean denominator the Pr(Y <= 0) term alone nears 1/2
        # per child.
        value = utility_bound(0.1, 1e4, 1, 1, 1, 1, 1)
        assert 0.9 < value <= 4.0

    def test_monte_carlo_child_integral(self):
        # Independent check of one child's integral by simulation at high
        # sample count.
        from vfboost.privacy.utility import _child_bound
        alpha, kappa, g, den = 0.2, 0.3, 1.2, 2.0
        gen = np.random.default_rng(5)
        x = g + kappa * gen.standard_normal(2 * 10**6)
        y = den + kappa * gen.standard_normal(2 * 10**6)
        with np.errstate(divide="ignore", invalid="ignore"):
            hit = (y <= 0) | (np.abs(x**2 / y - g**2 / den) >= alpha)
        p = hit.mean()
        se = math.sqrt(p * (1 - p) / hit.size)
        assert _child_bound(alpha, kappa, g, den) == pytest.approx(p, abs=4 * se)

    def test_kappa_from_protocol(self):
        assert utility_kappa(4, 9.0, 0.5) == pytest.approx(3.0)

    def test_preconditions(self):
        with pytest.raises(ValueError):
            utility_bound(0.6, 0.1, 1, 1, 1, 1, 1)
        with pytest.raises(ValueError):
            utility_bound(0.1, 0.0, 1, 1, 1, 1, 1)
        with pytest.raises(ValueError):
            utility_bound(0.1, 0.1, 1, -2, 1, 1, 1)


def test_advanced_epsilon_matches_compose():
    eps, _ = compose([(0.1, 1e-5)] * 30, "advanced", 1e-6)
    assert eps == pytest.approx(advanced_epsilon(0.1, 30, 1e-6), rel=1e-14)
