"""Data generators, the estimation pipeline and Monte Carlo harnesses.

Two experiment families are provided: spectral lines in ARMA noise (scalar,
high-resolution filter banks) and a random bivariate shaping filter with a
fixed resonance and a near-unit-circle notch.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Sequence

import numpy as np
import scipy.linalg as la
import scipy.signal as sig

from .gamma import project_covariance, range_gamma_basis
from .lti import StateSpace, build_filterbank, conjugate_pairs, spectral_radius
from .rer import ConvergenceError, RerSolution, SolverOptions, solve_rer
from .spectra import FactorDensity, circle_grid, fit_ar_prior

BURN_IN = 1000
ARMA_B = (0.5, 0.25)
ARMA_A = (1.0, -0.8)


# --------------------------------------------------------------------------
# pole lists

def parse_poles(spec: Sequence[Any]) -> list[complex]:
    """Expand a JSON pole list: numbers are real poles, ``{"radius", "angle"}``
    objects are conjugate pairs."""
    poles: list[complex] = []
    for item in spec:
        if isinstance(item, dict):
            try:
                poles += conjugate_pairs(float(item["radius"]), [float(item["angle"])])
            except KeyError as exc:
                raise ValueError(f"pole pair needs 'radius' and 'angle': {item!r}") from exc
        elif isinstance(item, (int, float)) and not isinstance(item, bool):
            poles.append(complex(float(item)))
        else:
            raise ValueError(f"cannot parse pole {item!r}")
    return poles


def pole_pairs(radius: float, angles: Sequence[float]) -> list[dict]:
    return [{"radius": float(radius), "angle": float(w)} for w in angles]


def lines_bank_poles(radius: float = 0.9,
                     angles: Sequence[float] = (0.42, 0.44, 0.46, 0.48, 0.50)) -> list:
    """Real poles ``0, 0.85, -0.85`` followed by the conjugate pairs."""
    return [0.0, 0.85, -0.85] + pole_pairs(radius, angles)


def shaping_bank_poles(radius: float = 0.7, pairs: int = 4) -> list:
    """``pairs`` conjugate pairs at angles ``k pi / (pairs + 1)``, ``k = 1..pairs``."""
    return pole_pairs(radius, [k * math.pi / (pairs + 1) for k in range(1, pairs + 1)])


# --------------------------------------------------------------------------
# generators

def arma_variance(b: Sequence[float] = ARMA_B, a: Sequence[float] = ARMA_A) -> float:
    """Stationary variance of ``a(q) z = b(q) nu`` for a first-order ``a``."""
    b0, b1 = b
    a1 = -a[1]
    # z = b0 nu + (b1 + a1 b0) sum_{k>=1} a1^{k-1} nu_{t-k}
    c = b1 + a1 * b0
    return b0 ** 2 + c ** 2 / (1.0 - a1 ** 2)


def gen_lines_in_noise(N: int, w1: float, w2: float, seed, amplitude: float = 0.5,
                       burn_in: int = BURN_IN) -> np.ndarray:
    """Two sinusoids with random phases in ARMA(1,1) noise, shape ``(N, 1)``."""
    if N < 1:
        raise ValueError("N must be positive")
    rng = np.random.default_rng(seed)
    phi1, phi2 = rng.standard_normal(2)
    nu = rng.standard_normal(N + burn_in)
    z = sig.lfilter(ARMA_B, ARMA_A, nu)[burn_in:]
    t = np.arange(1, N + 1)
    y = amplitude * np.sin(w1 * t + phi1) + amplitude * np.sin(w2 * t + phi2) + z
    return y[:, None]


@dataclass(frozen=True)
class ShapingFilter:
    """Square filter ``W(z) = b(z) R(z) / a(z)`` with a common denominator."""

    den: np.ndarray             # a, coefficients in z^{-1}, a[0] = 1
    num: np.ndarray             # (m, m, L) numerators in z^{-1}
    system: StateSpace

    @property
    def m(self) -> int:
        return self.num.shape[0]

    @property
    def order(self) -> int:
        return len(self.den) - 1

    def response(self, theta) -> np.ndarray:
        """``W(e^{j theta})`` with shape ``(len(theta), m, m)``."""
        zi = np.exp(-1j * np.atleast_1d(np.asarray(theta, dtype=float)))
        a = np.polyval(self.den[::-1], zi)
        out = np.empty((zi.size, self.m, self.m), dtype=complex)
        for i in range(self.m):
            for j in range(self.m):
                out[:, i, j] = np.polyval(self.num[i, j, ::-1], zi) / a
        return out

    def density(self, theta) -> np.ndarray:
        W = self.response(theta)
        return W @ np.conj(np.swapaxes(W, -1, -2))

    def simulate(self, N: int, rng: np.random.Generator, burn_in: int = BURN_IN) -> np.ndarray:
        """Output driven by unit-variance white noise, shape ``(N, m)``."""
        e = rng.standard_normal((N + burn_in, self.m))
        y = np.zeros((N + burn_in, self.m))
        for i in range(self.m):
            for j in range(self.m):
                y[:, i] += sig.lfilter(self.num[i, j], self.den, e[:, j])
        return y[burn_in:]


def _poly_from_roots(roots: Sequence[complex]) -> np.ndarray:
    """Real coefficients (in ``z^{-1}``, leading 1) of ``prod (1 - r z^{-1})``."""
    return np.real(np.poly(np.asarray(roots, dtype=complex)))


def gen_shaping_filter(order: int = 40, fixed_pole=(0.9, 0.52),
                       fixed_zero=(1.0 - 1e-5, 0.2), m: int = 2, seed=None,
                       max_radius: float = 0.9, max_tries: int = 100) -> ShapingFilter:
    """Random stable square shaping filter with a fixed pole pair and zero pair.

    The common denominator has the fixed pair ``r e^{+-j w}`` and
    ``(order - 2) / 2`` random conjugate pairs with radius uniform on
    ``[0, max_radius]`` and angle uniform on ``[0, pi]`` (one extra random
    real pole if ``order`` is odd). Entry ``(i, j)`` of the numerator is
    ``b(z) r_ij(z)`` with ``b`` holding the fixed zero pair and ``r_ij`` a
    random polynomial of degree two.
    """
    if order < 2:
        raise ValueError("order must be at least 2")
    rng = np.random.default_rng(seed)
    r0, w0 = fixed_pole
    for _ in range(max_tries):
        roots = [r0 * np.exp(1j * w0), r0 * np.exp(-1j * w0)]
        for _ in range((order - 2) // 2):
            p = rng.uniform(0.0, max_radius) * np.exp(1j * rng.uniform(0.0, np.pi))
            roots += [p, np.conj(p)]
        if (order - 2) % 2:
            roots.append(rng.uniform(-max_radius, max_radius))
        den = _poly_from_roots(roots)
        if np.max(np.abs(np.roots(den))) < 1.0:
            break
    else:
        raise RuntimeError("could not draw a stable denominator")
    rho, wz = fixed_zero
    b = _poly_from_roots([rho * np.exp(1j * wz), rho * np.exp(-1j * wz)])
    num = np.array([[np.convolve(b, rng.standard_normal(3)) for _ in range(m)] for _ in range(m)])
    return ShapingFilter(den, num, _shaping_state_space(den, num))


def _shaping_state_space(den: np.ndarray, num: np.ndarray) -> StateSpace:
    m = num.shape[0]
    blocks = []
    L = max(len(den), num.shape[2])
    den_p = np.pad(den, (0, L - len(den)))
    for j in range(m):
        col = np.pad(num[:, j, :], ((0, 0), (0, L - num.shape[2])))
        blocks.append(sig.tf2ss(col, den_p))
    A = la.block_diag(*[blk[0] for blk in blocks])
    B = la.block_diag(*[blk[1] for blk in blocks])
    C = np.hstack([blk[2] for blk in blocks])
    D = np.hstack([blk[3] for blk in blocks])
    return StateSpace(A, B, C, D)


def transient_length(bank: StateSpace) -> int:
    """``ceil(5 / (1 - rho(A)))`` samples."""
    # the small offset keeps exact ratios such as 5 / 0.1 from rounding up
    return int(math.ceil(5.0 / (1.0 - spectral_radius(bank.A)) - 1e-9))


def filter_states(bank: StateSpace, data: np.ndarray) -> np.ndarray:
    """States ``x(k+1) = A x(k) + B y(k)`` from ``x(0) = 0``; row ``k`` is ``x(k+1)``.

    A diagonalizable ``A`` with a well-conditioned eigenbasis is run as
    independent first-order modes through ``lfilter``; otherwise the
    recursion is stepped directly.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    if data.shape[1] != bank.n_inputs:
        raise ValueError(f"data has {data.shape[1]} channels, bank expects {bank.n_inputs}")
    A, B = bank.A, bank.B
    n = bank.n_states
    if n == 0:
        return np.zeros((data.shape[0], 0))
    lam, V = np.linalg.eig(A)
    if np.linalg.cond(V) < 1e6:
        U = data @ np.linalg.solve(V, B.astype(complex)).T        # modal inputs
        xi = np.empty_like(U)
        for i in range(n):
            xi[:, i] = sig.lfilter([1.0], [1.0, -lam[i]], U[:, i])
        return np.real(xi @ V.T)
    X = np.empty((data.shape[0], n))
    x = np.zeros(n)
    for k, y in enumerate(data):
        x = A @ x + B @ y
        X[k] = x
    return X


def sample_state_covariance(bank: StateSpace, data: np.ndarray) -> np.ndarray:
    """Sample covariance of the bank state after discarding the transient."""
    if not bank.is_stable():
        raise ValueError("filter bank must be stable")
    X = filter_states(bank, data)
    skip = transient_length(bank)
    if X.shape[0] <= skip:
        raise ValueError(f"need more than {skip} samples to pass the filter transient, "
                         f"got {X.shape[0]}")
    X = X[skip:]
    S = X.T @ X / X.shape[0]
    return 0.5 * (S + S.T)


def avg_error_curve(runs: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Mean over runs of the spectral norm of ``Phi_hat(theta) - Phi(theta)``.

    Each run is a pair of arrays of shape ``(M, m, m)`` (or ``(M,)`` for
    scalar densities) sampled on the same grid.
    """
    if not runs:
        raise ValueError("need at least one run")
    total = None
    shape = None
    for est, true in runs:
        est, true = np.asarray(est), np.asarray(true)
        if est.shape != true.shape or (shape is not None and est.shape != shape):
            raise ValueError("all spectra must share one grid")
        shape = est.shape
        diff = est - true
        if diff.ndim == 1:
            err = np.abs(diff)
        else:
            err = np.linalg.norm(diff, ord=2, axis=(-2, -1))
        total = err if total is None else total + err
    return total / len(runs)


# --------------------------------------------------------------------------
# random problem helpers (tests, benchmarks)

def random_min_phase_factor(m: int, k: int, rng: np.random.Generator,
                            radius: float = 0.9, zero_radius: float = 0.95) -> StateSpace:
    """Random stable, minimum-phase ``m x m`` factor with ``k`` states."""
    while True:
        A = rng.standard_normal((k, k))
        if k:
            A *= rng.uniform(0.2, radius) / spectral_radius(A)
        B = rng.standard_normal((k, m))
        C = 0.5 * rng.standard_normal((m, k))
        D = 2.0 * np.eye(m) + 0.1 * rng.standard_normal((m, m))
        if spectral_radius(A - B @ np.linalg.solve(D, C)) < zero_radius:
            return StateSpace(A, B, C, D)


def random_filterbank(n: int, m: int, rng: np.random.Generator,
                      max_radius: float = 0.9) -> StateSpace:
    """Reachable bank of ``n`` states mixing real poles and conjugate pairs.

    Real poles keep a minimum gap so the problem stays well conditioned.
    """
    pairs = int(rng.integers(0, n // 2 + 1))
    poles: list[complex] = []
    angles = np.sort(rng.uniform(0.2, 2.9, size=pairs))
    for w in angles:
        poles += conjugate_pairs(rng.uniform(0.3, max_radius), [w])
    k = n - 2 * pairs
    gap = 0.6 / max(n, 1)
    while True:
        real = rng.uniform(-max_radius, max_radius, size=k)
        if k < 2 or np.min(np.diff(np.sort(real))) > gap:
            break
    poles += list(real)
    return build_filterbank(poles, m=m)


# --------------------------------------------------------------------------
# estimation pipeline

PRIOR_KINDS = ("constant", "identity", "ar", "factor")


@dataclass
class Estimate:
    solution: RerSolution
    sigma_hat: np.ndarray
    sigma: np.ndarray
    prior: FactorDensity
    bank: StateSpace


def build_prior(prior: dict, data: np.ndarray) -> FactorDensity:
    """Prior density from a description: ``constant`` (sample covariance), ``identity``,
    ``ar`` (least-squares AR fit of ``order``) or ``factor`` (given realization)."""
    kind = prior.get("type", "constant")
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    m = data.shape[1]
    if kind == "constant":
        return FactorDensity.constant(data.T @ data / data.shape[0])
    if kind == "identity":
        return FactorDensity.constant(np.eye(m))
    if kind == "ar":
        return fit_ar_prior(data, int(prior.get("order", 3))).density
    if kind == "factor":
        W = prior["system"]
        if isinstance(W, dict):
            W = StateSpace.from_dict(W)
        return FactorDensity(W)
    raise ValueError(f"unknown prior type {kind!r}; expected one of {PRIOR_KINDS}")


def estimate_spectrum(data: np.ndarray, bank: StateSpace, prior: dict | FactorDensity,
                      opts: SolverOptions | None = None) -> Estimate:
    """Sample state covariance, feasible projection, prior, dual solve."""
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    S_hat = sample_state_covariance(bank, data)
    basis = range_gamma_basis(bank.A, bank.B)
    S = project_covariance(S_hat, basis).Sigma
    psi = prior if isinstance(prior, FactorDensity) else build_prior(prior, data)
    sol = solve_rer(bank, psi, S, opts)
    return Estimate(sol, S_hat, S, psi, bank)


def local_maxima(values: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Angles of the strict interior local maxima of a sampled curve."""
    idx, _ = sig.find_peaks(np.asarray(values, dtype=float))
    return theta[idx]


def count_peaks(phi: FactorDensity, lo: float = 0.3, hi: float = 0.7,
                points: int = 4001) -> np.ndarray:
    """Peak locations of a scalar density on ``(lo, hi)``."""
    th = np.linspace(lo, hi, points)
    vals = np.real(phi.evaluate(th)).reshape(points, -1)[:, 0]
    return local_maxima(vals, th)


def lines_resolved(peaks: np.ndarray, w1: float, w2: float, tol: float = 0.02) -> bool:
    """Exactly two peaks, one within ``tol`` of each line."""
    if len(peaks) != 2:
        return False
    p = np.sort(peaks)
    return abs(p[0] - min(w1, w2)) <= tol and abs(p[1] - max(w1, w2)) <= tol


# --------------------------------------------------------------------------
# experiments

@dataclass
class ExperimentConfig:
    kind: str = "lines"
    N: int = 300
    runs: int = 50
    seed: int = 0
    bank_poles: list = field(default_factory=lines_bank_poles)
    m: int = 1
    prior: dict = field(default_factory=lambda: {"type": "constant"})
    solver: dict = field(default_factory=lambda: SolverOptions().to_dict())
    grid: int = 2048
    params: dict = field(default_factory=lambda: {"w1": 0.42, "w2": 0.53, "amplitude": 0.5})

    def __post_init__(self):
        if int(self.N) <= 0:
            raise ValueError("N must be positive")
        if int(self.runs) <= 0:
            raise ValueError("runs must be positive")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ExperimentConfig":
        if name == "lines":
            cfg = cls()
        elif name == "lines-close":
            cfg = cls(kind="lines-close", bank_poles=lines_bank_poles(0.95),
                      params={"w1": 0.45, "w2": 0.47, "amplitude": 0.5})
        elif name == "shaping":
            cfg = cls(kind="shaping", bank_poles=shaping_bank_poles(), m=2,
                      prior={"type": "ar", "order": 3},
                      params={"order": 40, "fixed_pole": [0.9, 0.52],
                              "fixed_zero": [1.0 - 1e-5, 0.2]})
        else:
            raise ValueError(f"unknown experiment {name!r}")
        return replace(cfg, **overrides)

    def options(self) -> SolverOptions:
        return SolverOptions(**self.solver)

    def bank(self) -> StateSpace:
        return build_filterbank(parse_poles(self.bank_poles), m=self.m)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class RunResult:
    run: int
    converged: bool
    estimate: np.ndarray | None      # density on the grid
    truth: np.ndarray                # true density on the grid
    prior: np.ndarray | None
    iterations: int = 0
    residual: float = float("nan")
    degree: int | None = None
    degree_bound: int | None = None
    peaks: list = field(default_factory=list)
    error: str | None = None

    def summary(self) -> dict:
        return {"run": self.run, "converged": self.converged, "iterations": self.iterations,
                "relative_residual": self.residual, "degree": self.degree,
                "degree_bound": self.degree_bound, "peaks": [float(p) for p in self.peaks],
                "error": self.error}


def run_seed(seed: int, run: int) -> np.random.SeedSequence:
    """Per-run seed derived from ``(seed, run)`` only."""
    return np.random.SeedSequence([int(seed), int(run)])


def _lines_truth(theta: np.ndarray) -> np.ndarray:
    """ARMA part of the line spectrum (the lines themselves are atoms)."""
    zi = np.exp(-1j * theta)
    H = (ARMA_B[0] + ARMA_B[1] * zi) / (ARMA_A[0] + ARMA_A[1] * zi)
    return np.abs(H) ** 2


def run_once(cfg: ExperimentConfig, run: int, filt: ShapingFilter | None = None) -> RunResult:
    """Generate data for one run and estimate its spectrum."""
    theta = circle_grid(cfg.grid)
    ss = run_seed(cfg.seed, run)
    bank = cfg.bank()
    p = cfg.params
    if cfg.kind in ("lines", "lines-close"):
        data = gen_lines_in_noise(cfg.N, p["w1"], p["w2"], ss, p.get("amplitude", 0.5))
        truth = _lines_truth(theta)[:, None, None]
    elif cfg.kind == "shaping":
        if filt is None:
            filt = gen_shaping_filter(int(p["order"]), tuple(p["fixed_pole"]),
                                      tuple(p["fixed_zero"]), cfg.m, seed=cfg.seed)
        data = filt.simulate(cfg.N, np.random.default_rng(ss))
        truth = filt.density(theta)
    else:
        raise ValueError(f"unknown experiment kind {cfg.kind!r}")
    try:
        est = estimate_spectrum(data, bank, cfg.prior, cfg.options())
    except (ConvergenceError, ValueError, np.linalg.LinAlgError) as exc:
        return RunResult(run, False, None, truth, None, error=f"{type(exc).__name__}: {exc}")
    sol = est.solution
    peaks = []
    if cfg.kind in ("lines", "lines-close"):
        peaks = list(count_peaks(sol.spectrum))
    return RunResult(run, True, sol.spectrum.evaluate(theta), truth, est.prior.evaluate(theta),
                     sol.iterations, sol.relative_residual, sol.degree.degree, sol.degree.bound,
                     peaks)


def thread_count(requested: int | None = None) -> int:
    env = os.environ.get("RER_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, requested or cap))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    runs: list
    theta: np.ndarray
    error_curve: np.ndarray | None
    prior_error_curve: np.ndarray | None

    @property
    def converged(self) -> int:
        return sum(r.converged for r in self.runs)


def run_experiment(cfg: ExperimentConfig, threads: int | None = None) -> ExperimentResult:
    """All runs of an experiment; results are ordered by run index."""
    filt = None
    if cfg.kind == "shaping":
        p = cfg.params
        filt = gen_shaping_filter(int(p["order"]), tuple(p["fixed_pole"]),
                                  tuple(p["fixed_zero"]), cfg.m, seed=cfg.seed)
    workers = thread_count(threads)
    if workers == 1:
        runs = [run_once(cfg, r, filt) for r in range(cfg.runs)]
    else:
        with ThreadPoolExecutor(workers) as ex:
            runs = list(ex.map(lambda r: run_once(cfg, r, filt), range(cfg.runs)))
    ok = [r for r in runs if r.converged]
    theta = circle_grid(cfg.grid)
    curve = avg_error_curve([(r.estimate, r.truth) for r in ok]) if ok else None
    prior_curve = avg_error_curve([(r.prior, r.truth) for r in ok]) if ok else None
    return ExperimentResult(cfg, runs, theta, curve, prior_curve)
