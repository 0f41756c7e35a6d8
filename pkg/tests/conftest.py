from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rerspec.gamma import gamma_apply, normalize_problem, range_gamma_basis
from rerspec.lti import StateSpace, series
from rerspec.sim import random_filterbank, random_min_phase_factor
from rerspec.spectra import FactorDensity, circle_grid

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile("default")


def grid_transfer(sys: StateSpace, M: int = 2048) -> np.ndarray:
    return sys.transfer(circle_grid(M))


def herm(X: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(X, -1, -2))


class QuadOracle:
    """Brute-force grid quadrature of the integrals behind the dual solver."""

    def __init__(self, G1: StateSpace, lam: np.ndarray, M: int = 2048):
        self.G = grid_transfer(G1, M)                       # (M, n, m)
        Gs = herm(self.G)
        self.Q = np.eye(G1.n_inputs) + Gs @ lam @ self.G
        self.T = self.G @ np.linalg.solve(self.Q, Gs)       # G Q^{-1} G^*

    def logdet(self) -> float:
        return float(np.mean(np.linalg.slogdet(self.Q)[1]))

    def Y(self) -> np.ndarray:
        return np.real(np.mean(self.T, axis=0)) - np.eye(self.T.shape[1])

    def Yk(self, Sk: np.ndarray) -> np.ndarray:
        return np.real(np.mean(self.T @ Sk @ self.T, axis=0))

    def min_eig(self) -> float:
        return float(np.min(np.linalg.eigvalsh(self.Q)))


def random_problem(rng: np.random.Generator, n_max: int = 10, m_max: int = 3, k_max: int = 3,
                   feasible_prior: bool = False):
    """Random bank, prior factor and feasible covariance."""
    m = int(rng.integers(1, m_max + 1))
    n = int(rng.integers(max(2, m), n_max + 1))
    G = random_filterbank(n, m, rng)
    W = random_min_phase_factor(m, int(rng.integers(0, k_max + 1)), rng)
    if feasible_prior:
        Sigma = gamma_apply(G, FactorDensity(W))
    else:
        W0 = random_min_phase_factor(m, int(rng.integers(0, k_max + 2)), rng)
        Sigma = gamma_apply(G, FactorDensity(W0))
    return G, W, Sigma


def interior_multiplier(G1: StateSpace, basis, rng: np.random.Generator,
                        margin: float = 0.3) -> np.ndarray:
    """Random ``Lam`` in the range with ``min eig(I + G1^* Lam G1) >= margin`` on the grid."""
    c = rng.standard_normal(basis.dim)
    lam = basis.combine(c)
    lam /= np.linalg.norm(lam)
    scale = abs(rng.normal(0.0, 2.0))
    for _ in range(60):
        if QuadOracle(G1, scale * lam, M=512).min_eig() >= margin:
            return scale * lam
        scale *= 0.5
    return 0.0 * lam


def normalized_instance(rng: np.random.Generator, n_max: int = 8, m_max: int = 3):
    G, W, Sigma = random_problem(rng, n_max=n_max, m_max=m_max)
    prob = normalize_problem(G.A, G.B, Sigma)
    basis = range_gamma_basis(prob.A, prob.B, anchor=np.eye(G.n_states))
    G1 = series(W, prob.bank)
    return G1, basis


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
