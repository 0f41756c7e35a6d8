from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rerspec.lti import StateSpace
from rerspec.sim import random_min_phase_factor
from rerspec.spectra import (FactorDensity, GridDensity, NotPositiveDefiniteError, ar_factor,
                             circle_grid, circular_gauss_kl, d_rer, entropy_rate, fit_ar_prior,
                             grid_from_csv, grid_to_csv, increment_covariance,
                             increment_integrals, itakura_saito, prediction_error_logdet,
                             read_grid_csv, rer_time_domain, sample_on_grid,
                             spectral_rer_partition, write_grid_csv)

seeds = st.integers(0, 2 ** 32 - 1)
MA1 = FactorDensity(StateSpace(0.0, 1.0, 0.5, 1.0))          # |1 + 0.5 e^{-j theta}|^2
AR1 = FactorDensity(StateSpace(0.5, 1.0, 0.5, 1.0))          # 1/(1 - 0.5 z^{-1})


def const(c):
    return FactorDensity.constant(c)


class TestDensities:
    def test_ma1_value_at_zero(self):
        assert MA1.evaluate(0.0)[0, 0].real == pytest.approx(2.25)

    def test_ma1_hermitian_symmetry(self):
        th = circle_grid(64)
        np.testing.assert_allclose(MA1.evaluate(th), np.conj(MA1.evaluate(-th)), atol=1e-14)

    def test_degree_counts_both_factors(self):
        assert MA1.degree == 2 and MA1.factor_degree == 1
        assert const(2.0).degree == 0

    def test_factor_validation(self):
        with pytest.raises(ValueError):
            FactorDensity(StateSpace(1.5, 1.0, 1.0, 1.0))
        with pytest.raises(ValueError):
            FactorDensity(StateSpace(0.0, 1.0, 1.0, 0.0))

    def test_grid_density_rejects_non_hermitian(self):
        vals = np.zeros((4, 2, 2), dtype=complex)
        vals[:, 0, 1] = 1.0
        with pytest.raises(ValueError):
            GridDensity(circle_grid(4), vals)

    def test_grid_density_rejects_rectangular(self):
        with pytest.raises(ValueError):
            GridDensity(circle_grid(4), np.ones((4, 2, 3)))

    def test_grid_density_nearest_node(self):
        g = sample_on_grid(MA1, 256)
        th = g.theta[10]
        np.testing.assert_allclose(g.evaluate(th + 1e-4), MA1.evaluate(th), atol=1e-12)

    def test_minimum_phase_flag(self):
        assert MA1.is_minimum_phase()
        assert not FactorDensity(StateSpace(0.0, 1.0, 2.0, 1.0)).is_minimum_phase()


class TestDistances:
    def test_identical_is_zero(self):
        assert d_rer(MA1, MA1) == pytest.approx(0.0, abs=1e-14)

    def test_constant_pair(self):
        assert d_rer(const(2.0), const(1.0)) == pytest.approx((1 - math.log(2)) / 2, abs=1e-12)
        assert d_rer(const(2.0), const(1.0)) == pytest.approx(0.153426, abs=1e-6)

    def test_half_itakura_saito(self):
        assert d_rer(MA1, AR1) == pytest.approx(0.5 * itakura_saito(MA1, AR1), rel=1e-12)

    def test_itakura_saito_constant(self):
        assert itakura_saito(lambda th: 2.0 * np.ones_like(th),
                             lambda th: np.ones_like(th)) == pytest.approx(1 - math.log(2))

    def test_itakura_saito_scale_invariance(self):
        scaled = FactorDensity(StateSpace(0.5, 1.0, 1.5, 3.0))
        s2 = FactorDensity(StateSpace(0.0, 1.0, 1.5, 3.0))
        assert itakura_saito(scaled, s2) == pytest.approx(itakura_saito(AR1, MA1), rel=1e-10)

    def test_itakura_saito_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            itakura_saito(lambda th: np.zeros_like(th), lambda th: np.ones_like(th))

    def test_not_positive_definite(self):
        bad = GridDensity(circle_grid(8), np.zeros(8))
        with pytest.raises(NotPositiveDefiniteError):
            d_rer(bad, bad)

    def test_nonnegative_on_random_pairs(self, rng):
        for _ in range(10):
            a = FactorDensity(random_min_phase_factor(2, 2, rng))
            b = FactorDensity(random_min_phase_factor(2, 1, rng))
            assert d_rer(a, b) >= 0

    @given(seeds)
    def test_time_domain_route_agrees(self, seed):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(1, 4))
        a = FactorDensity(random_min_phase_factor(m, int(rng.integers(0, 4)), rng))
        b = FactorDensity(random_min_phase_factor(m, int(rng.integers(0, 4)), rng))
        x, y = d_rer(a, b), rer_time_domain(a, b)
        assert abs(x - y) <= 1e-12 * max(1.0, abs(x))


class TestEntropy:
    def test_white_noise_entropy(self):
        assert entropy_rate(const(1.0)) == pytest.approx(0.5 * math.log(2 * math.pi * math.e))

    def test_ar1_entropy_equals_white(self):
        # Szego: prediction error variance of 1/(1 - 0.5 z^{-1}) is one
        assert entropy_rate(AR1) == pytest.approx(0.5 * math.log(2 * math.pi * math.e), abs=1e-10)

    def test_grid_and_factor_forms_agree(self):
        assert entropy_rate(sample_on_grid(MA1, 4096)) == pytest.approx(entropy_rate(MA1), abs=1e-10)

    @given(seeds)
    def test_szego_kolmogorov(self, seed):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(1, 4))
        phi = FactorDensity(random_min_phase_factor(m, int(rng.integers(0, 5)), rng))
        mean_ld = 2 * entropy_rate(phi) - m * math.log(2 * math.pi * math.e)
        assert abs(mean_ld - prediction_error_logdet(phi)) <= 1e-8


class TestIncrements:
    @pytest.mark.parametrize("a,b", [(0.0, np.pi), (0.1, 0.4), (-2.0, 1.3)])
    def test_ma1_antiderivative(self, a, b):
        F = lambda t: 1.25 * t + math.sin(t)
        q = increment_covariance(MA1, a, b).Q[0, 0]
        assert q.real == pytest.approx(F(b) - F(a), abs=1e-12)
        assert abs(q.imag) < 1e-14

    def test_hermitian_pd(self, rng):
        phi = FactorDensity(random_min_phase_factor(3, 2, rng))
        Q = increment_covariance(phi, 0.2, 0.5).Q
        np.testing.assert_allclose(Q, Q.conj().T, atol=1e-15)
        assert np.linalg.eigvalsh(Q)[0] > 0

    def test_empty_interval(self):
        with pytest.raises(ValueError):
            increment_covariance(MA1, 1.0, 1.0)

    def test_panels_add_up(self):
        parts = increment_integrals(MA1, np.linspace(0, np.pi, 9))
        whole = increment_covariance(MA1, 0, np.pi).Q
        np.testing.assert_allclose(parts.sum(axis=0), whole, atol=1e-12)

    def test_grid_density_is_piecewise_exact(self):
        g = GridDensity(circle_grid(4), np.array([1.0, 2.0, 3.0, 4.0]))
        # nodes at -pi/2, 0, pi/2, pi with breaks at midpoints
        total = increment_integrals(g, [-np.pi, np.pi]).sum()
        assert total.real == pytest.approx(2 * np.pi * 2.5)


class TestCircularKL:
    def test_zero_for_equal(self):
        P = np.array([[2.0, 0.5j], [-0.5j, 1.0]])
        assert circular_gauss_kl(P, P) == pytest.approx(0.0, abs=1e-14)

    def test_scalar_closed_form(self):
        assert circular_gauss_kl(np.array([[2.0]]), np.array([[1.0]])) == pytest.approx(1 - math.log(2))

    @given(seeds)
    def test_congruence_invariance(self, seed):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(1, 4))
        X = rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))
        Y = rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))
        T = rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m)) + 3 * np.eye(m)
        P, Q = X @ X.conj().T + np.eye(m), Y @ Y.conj().T + np.eye(m)
        k1 = circular_gauss_kl(P, Q)
        k2 = circular_gauss_kl(T @ P @ T.conj().T, T @ Q @ T.conj().T)
        assert k1 >= 0
        assert abs(k1 - k2) <= 1e-9 * max(1.0, k1)

    def test_rejects_indefinite(self):
        with pytest.raises(np.linalg.LinAlgError):
            circular_gauss_kl(np.array([[-1.0]]), np.array([[1.0]]))


class TestPartition:
    @pytest.mark.parametrize("n", [1, 2, 7, 64])
    def test_exact_for_constants(self, n):
        a = const(np.array([[2.0, 0.3], [0.3, 1.0]]))
        b = const(np.eye(2))
        assert abs(spectral_rer_partition(a, b, n) - d_rer(a, b)) <= 1e-12

    def test_converges_to_time_domain(self):
        ref = rer_time_domain(MA1, AR1)
        gaps = [abs(spectral_rer_partition(MA1, AR1, n) - ref) for n in (8, 16, 32, 64, 128)]
        assert all(b < a for a, b in zip(gaps, gaps[1:]))
        assert gaps[-1] < 1e-4

    def test_requires_positive_n(self):
        with pytest.raises(ValueError):
            spectral_rer_partition(MA1, AR1, 0)


class TestARPrior:
    def test_ar1_consistency(self):
        rng = np.random.default_rng(3)
        e = rng.standard_normal(100_000)
        y = np.empty_like(e)
        prev = 0.0
        for t in range(e.size):
            prev = 0.5 * prev + e[t]
            y[t] = prev
        fit = fit_ar_prior(y, 1)
        assert 0.45 <= fit.coefs[0, 0, 0] <= 0.55
        assert fit.noise_cov[0, 0] == pytest.approx(1.0, abs=0.02)

    def test_white_noise(self):
        rng = np.random.default_rng(4)
        y = rng.standard_normal((20_000, 2))
        fit = fit_ar_prior(y, 1)
        se = 1 / math.sqrt(y.shape[0])
        assert np.max(np.abs(fit.coefs)) < 5 * se
        sample = y.T @ y / y.shape[0]
        np.testing.assert_allclose(fit.noise_cov, sample, atol=5 * se * 2)

    def test_order_zero_is_sample_covariance(self):
        rng = np.random.default_rng(5)
        y = rng.standard_normal((500, 2))
        fit = fit_ar_prior(y, 0)
        np.testing.assert_allclose(fit.noise_cov, y.T @ y / 500)
        assert fit.density.factor_degree == 0

    def test_unstable_fit_is_shrunk(self):
        y = np.arange(1.0, 60.0)          # explosive trend gives a unit-root fit
        fit = fit_ar_prior(y, 2)
        assert fit.density.W.is_stable()

    def test_rank_deficient_drops_order(self):
        y = np.zeros((50, 1))
        y[::2] = 1.0
        fit = fit_ar_prior(y, 3)
        assert fit.order < 3 and fit.density.W.is_stable()

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            fit_ar_prior(np.ones(3), 3)

    def test_companion_factor(self):
        W = ar_factor(np.array([[[0.5]]]), np.array([[1.0]]))
        z = np.exp(0.3j)
        assert W.transfer(0.3)[0, 0] == pytest.approx(1 / (1 - 0.5 / z))


class TestGridCsv:
    def test_round_trip_bytes(self, tmp_path):
        g = sample_on_grid(FactorDensity(random_min_phase_factor(2, 2, np.random.default_rng(1))), 64)
        text = grid_to_csv(g)
        assert grid_to_csv(grid_from_csv(text)) == text
        p = tmp_path / "g.csv"
        write_grid_csv(g, p)
        back = read_grid_csv(p)
        np.testing.assert_array_equal(back.values, g.values)
        np.testing.assert_array_equal(back.theta, g.theta)

    def test_bad_column_count(self):
        with pytest.raises(ValueError):
            grid_from_csv("theta,a,b,c\n0,1,2,3\n")
