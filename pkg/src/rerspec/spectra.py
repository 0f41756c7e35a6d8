"""Spectral densities on the unit circle and entropy functionals on them.

Integrals over the circle use the periodic rectangle rule on the uniform grid
``theta_j = -pi + 2 pi (j + 1) / M``, ``j = 0..M-1`` (so the grid covers
``(-pi, pi]``). For rational integrands this converges geometrically; the
adaptive variants double ``M`` until the relative change drops below
``1e-10``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Union

import numpy as np

from .lti import StateSpace, eval_transfer, spectral_radius

DEFAULT_GRID = 2048
MAX_GRID = 2 ** 17
QUAD_RTOL = 1e-10


class NotPositiveDefiniteError(ValueError):
    """A density failed to be positive definite at some angle."""

    def __init__(self, theta: float, min_eig: float):
        super().__init__(f"density not positive definite at theta={theta:.6g} "
                         f"(min eigenvalue {min_eig:.3g})")
        self.theta = theta
        self.min_eig = min_eig


def circle_grid(M: int = DEFAULT_GRID) -> np.ndarray:
    """``M`` uniform angles covering ``(-pi, pi]``."""
    return -np.pi + 2.0 * np.pi * (np.arange(M) + 1.0) / M


@dataclass(frozen=True)
class FactorDensity:
    """``Phi = W W^*`` for a stable realization ``W`` with square invertible D."""

    W: StateSpace

    def __post_init__(self):
        if self.W.n_inputs != self.W.n_outputs:
            raise ValueError("spectral factor must be square")
        if abs(np.linalg.det(self.W.D)) < 1e-300:
            raise ValueError("spectral factor needs an invertible feedthrough D")
        if not self.W.is_stable():
            raise ValueError("spectral factor must be stable")

    @property
    def m(self) -> int:
        return self.W.n_inputs

    @property
    def factor_degree(self) -> int:
        """State dimension of the factor."""
        return self.W.n_states

    @property
    def degree(self) -> int:
        """Degree of the density itself (twice the factor's)."""
        return 2 * self.W.n_states

    def evaluate(self, theta) -> np.ndarray:
        H = eval_transfer(self.W, theta)
        return H @ np.conj(np.swapaxes(H, -1, -2))

    def is_minimum_phase(self) -> bool:
        W = self.W
        if W.n_states == 0:
            return True
        Dinv = np.linalg.inv(W.D)
        return spectral_radius(W.A - W.B @ Dinv @ W.C) < 1.0

    @classmethod
    def constant(cls, cov) -> "FactorDensity":
        """Flat density equal to ``cov`` (factor ``chol(cov)``)."""
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        return cls(StateSpace.static(np.linalg.cholesky(cov)))


@dataclass(frozen=True)
class GridDensity:
    """Density sampled on a uniform grid; values have shape ``(M, m, m)``."""

    theta: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=complex)
        if vals.ndim == 1:
            vals = vals[:, None, None]
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))
        if vals.shape[0] != self.theta.size:
            raise ValueError("theta and values lengths differ")
        if vals.ndim != 3 or vals.shape[1] != vals.shape[2]:
            raise ValueError("grid values must be square matrices")
        skew = np.max(np.abs(vals - np.conj(np.swapaxes(vals, -1, -2))), initial=0.0)
        if skew > 1e-10 * max(1.0, np.max(np.abs(vals), initial=0.0)):
            raise ValueError(f"grid values are not Hermitian (max skew {skew:.3e})")

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def evaluate(self, theta) -> np.ndarray:
        th = np.asarray(theta, dtype=float)
        wrapped = np.angle(np.exp(1j * th))
        dist = np.abs(np.angle(np.exp(1j * (wrapped[..., None] - self.theta))))
        return self.values[np.argmin(dist, axis=-1)]


SpectralDensity = Union[FactorDensity, GridDensity]


def eval_density(phi: SpectralDensity, theta) -> np.ndarray:
    """Hermitian value(s) of ``phi`` at ``theta``."""
    return phi.evaluate(theta)


def _common_grid(*densities) -> np.ndarray | None:
    grids = [d.theta for d in densities if isinstance(d, GridDensity)]
    if not grids:
        return None
    for g in grids[1:]:
        if g.shape != grids[0].shape or not np.allclose(g, grids[0]):
            raise ValueError("grid densities are sampled on different grids")
    return grids[0]


def circle_mean(integrand: Callable[[np.ndarray], np.ndarray], *densities,
                grid: int | None = None, rtol: float = QUAD_RTOL):
    """``(1/2pi) int integrand(theta) dtheta`` by the rectangle rule.

    With ``grid=None`` and only factor densities the grid starts at
    ``DEFAULT_GRID`` points and doubles until converged.
    """
    fixed = _common_grid(*densities)
    if fixed is not None:
        return np.mean(integrand(fixed), axis=0)
    if grid is not None:
        return np.mean(integrand(circle_grid(grid)), axis=0)
    M = DEFAULT_GRID
    prev = np.mean(integrand(circle_grid(M)), axis=0)
    while M < MAX_GRID:
        M *= 2
        cur = np.mean(integrand(circle_grid(M)), axis=0)
        if np.max(np.abs(cur - prev)) <= rtol * max(1.0, np.max(np.abs(cur))):
            return cur
        prev = cur
    return prev


def _check_pd(values: np.ndarray, theta: np.ndarray) -> np.ndarray:
    w = np.linalg.eigvalsh(values)
    bad = w[:, 0] <= 0
    if np.any(bad):
        k = int(np.argmax(bad))
        raise NotPositiveDefiniteError(float(theta[k]), float(w[k, 0]))
    return w


def _logdet(values: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return np.sum(np.log(_check_pd(values, theta)), axis=-1)


def d_rer(phi: SpectralDensity, psi: SpectralDensity, grid: int | None = None) -> float:
    """Relative-entropy-rate distance of ``phi`` from the reference ``psi``.

    ``(1/4pi) int logdet(phi^{-1} psi) + tr[psi^{-1}(phi - psi)] dtheta``.
    """
    def f(th):
        P, S = phi.evaluate(th), psi.evaluate(th)
        ld = _logdet(S, th) - _logdet(P, th)
        tr = np.real(np.trace(np.linalg.solve(S, P - S), axis1=-2, axis2=-1))
        return ld + tr

    return 0.5 * float(circle_mean(f, phi, psi, grid=grid))


def rer_time_domain(phi_y: SpectralDensity, phi_z: SpectralDensity,
                    grid: int | None = None) -> float:
    """Relative entropy rate of process ``y`` with respect to ``z``.

    Evaluated through the generalized eigenvalues ``l_i`` of
    ``(phi_y, phi_z)``: the integrand is ``sum_i (l_i - log l_i - 1)``.
    """
    def f(th):
        Y, Z = phi_y.evaluate(th), phi_z.evaluate(th)
        _check_pd(Y, th)
        L = np.linalg.cholesky(Z)
        Li = np.linalg.inv(L)
        lam = np.linalg.eigvalsh(Li @ Y @ np.conj(np.swapaxes(Li, -1, -2)))
        return np.sum(lam - np.log(lam) - 1.0, axis=-1)

    return 0.5 * float(circle_mean(f, phi_y, phi_z, grid=grid))


def itakura_saito(phi, psi, grid: int | None = None) -> float:
    """Classical Itakura-Saito distance between scalar densities.

    ``phi`` and ``psi`` may be densities or callables returning positive
    values on an array of angles.
    """
    def val(d, th):
        v = d.evaluate(th) if hasattr(d, "evaluate") else np.asarray(d(th))
        v = np.real(np.asarray(v)).reshape(th.size, -1)
        if v.shape[1] != 1:
            raise ValueError("itakura_saito takes scalar densities")
        return v[:, 0]

    def f(th):
        a, b = val(phi, th), val(psi, th)
        if np.any(a <= 0) or np.any(b <= 0):
            raise ValueError("Itakura-Saito distance needs positive densities")
        r = a / b
        return r - np.log(r) - 1.0

    dens = [d for d in (phi, psi) if hasattr(d, "evaluate")]
    return float(circle_mean(f, *dens, grid=grid))


def entropy_rate(phi: SpectralDensity, grid: int | None = None) -> float:
    """Differential entropy rate of a Gaussian process with density ``phi``."""
    m = phi.m
    mean_ld = float(circle_mean(lambda th: _logdet(phi.evaluate(th), th), phi, grid=grid))
    return 0.5 * m * math.log(2 * math.pi * math.e) + 0.5 * mean_ld


def prediction_error_logdet(phi: FactorDensity) -> float:
    """``log det(D D^T)`` of a minimum-phase factor: the one-step prediction
    error variance (Szego-Kolmogorov)."""
    D = phi.W.D
    return float(np.linalg.slogdet(D @ D.T)[1])


@dataclass(frozen=True)
class IncrementCovariance:
    """Covariance ``int_a^b phi(xi) dxi`` of a spectral increment."""

    a: float
    b: float
    Q: np.ndarray


_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gauss_legendre(k: int):
    if k not in _GL_CACHE:
        _GL_CACHE[k] = np.polynomial.legendre.leggauss(k)
    return _GL_CACHE[k]


def _panel_integrals(phi: SpectralDensity, edges: np.ndarray, k: int) -> np.ndarray:
    x, w = _gauss_legendre(k)
    a, b = edges[:-1], edges[1:]
    half = 0.5 * (b - a)
    nodes = (0.5 * (a + b))[:, None] + half[:, None] * x[None, :]
    vals = phi.evaluate(nodes.ravel()).reshape(nodes.shape + (phi.m, phi.m))
    return np.einsum("pk,k,pkij->pij", np.broadcast_to(half[:, None], nodes.shape), w, vals)


def increment_integrals(phi: SpectralDensity, edges, rtol: float = 1e-13) -> np.ndarray:
    """Integrals of ``phi`` over consecutive intervals ``[edges[i], edges[i+1]]``.

    Gauss-Legendre per interval; the node count doubles until every panel
    agrees with the previous refinement to ``rtol``.
    """
    edges = np.asarray(edges, dtype=float)
    if np.any(np.diff(edges) <= 0):
        raise ValueError("increment intervals must be nonempty and increasing")
    if isinstance(phi, GridDensity):
        # piecewise-constant density: exact integral of the nearest-node interpolant
        fine = np.unique(np.concatenate([edges, _grid_breaks(phi, edges[0], edges[-1])]))
        mids = 0.5 * (fine[:-1] + fine[1:])
        pieces = phi.evaluate(mids) * np.diff(fine)[:, None, None]
        idx = np.searchsorted(edges, mids, side="right") - 1
        out = np.zeros((edges.size - 1, phi.m, phi.m), dtype=complex)
        np.add.at(out, idx, pieces)
        return out
    k = 8
    prev = _panel_integrals(phi, edges, k)
    while k < 256:
        k *= 2
        cur = _panel_integrals(phi, edges, k)
        scale = np.max(np.abs(cur), axis=(1, 2))
        if np.all(np.max(np.abs(cur - prev), axis=(1, 2)) <= rtol * np.maximum(scale, 1e-300)):
            return cur
        prev = cur
    return prev


def _grid_breaks(phi: GridDensity, a: float, b: float) -> np.ndarray:
    th = np.sort(phi.theta)
    th = np.concatenate([[th[-1] - 2 * np.pi], th, [th[0] + 2 * np.pi]])
    mids = 0.5 * (th[:-1] + th[1:])
    return mids[(mids > a) & (mids < b)]


def increment_covariance(phi: SpectralDensity, a: float, b: float) -> IncrementCovariance:
    if not b > a:
        raise ValueError(f"empty interval [{a}, {b}]")
    Q = increment_integrals(phi, [a, b])[0]
    Q = 0.5 * (Q + Q.conj().T)
    return IncrementCovariance(float(a), float(b), Q)


def circular_gauss_kl(P: np.ndarray, Q: np.ndarray) -> float:
    """KL divergence between circularly-symmetric complex Gaussians.

    ``log det(P^{-1} Q) + tr(Q^{-1} P) - m`` for Hermitian PD ``P, Q``.
    """
    P = np.atleast_2d(P)
    Q = np.atleast_2d(Q)
    if P.shape != Q.shape:
        raise ValueError("P and Q must have the same shape")
    sP, ldP = np.linalg.slogdet(P)
    sQ, ldQ = np.linalg.slogdet(Q)
    if np.real(sP) <= 0 or np.real(sQ) <= 0 or not np.isfinite(ldP + ldQ):
        raise np.linalg.LinAlgError("circular_gauss_kl needs positive definite inputs")
    tr = np.real(np.trace(np.linalg.solve(Q, P)))
    return float(ldQ - ldP + tr - P.shape[0])


def spectral_rer_partition(phi_y: SpectralDensity, phi_z: SpectralDensity, n: int) -> float:
    """Spectral-domain relative entropy rate at partition size ``n``.

    The half circle ``[0, pi]`` is cut into ``n`` equal intervals; each pair of
    increment covariances contributes a circular Gaussian KL term and the sum
    is scaled by ``1/(2n)``.
    """
    if n < 1:
        raise ValueError("partition count must be >= 1")
    edges = np.pi * np.arange(n + 1) / n
    Qy = increment_integrals(phi_y, edges)
    Qz = increment_integrals(phi_z, edges)
    total = 0.0
    for qy, qz in zip(Qy, Qz):
        total += circular_gauss_kl(0.5 * (qy + qy.conj().T), 0.5 * (qz + qz.conj().T))
    return total / (2 * n)


# --------------------------------------------------------------------------
# Coarse AR prior
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ARFit:
    coefs: np.ndarray          # (p, m, m), y_t = sum_i coefs[i] y_{t-1-i} + e_t
    noise_cov: np.ndarray      # (m, m)
    density: FactorDensity
    order: int
    shrunk: bool


def ar_factor(coefs: np.ndarray, noise_cov: np.ndarray) -> StateSpace:
    """Companion realization of ``(I - sum_i A_i z^{-i})^{-1} chol(noise_cov)``."""
    coefs = np.asarray(coefs, dtype=float)
    L = np.linalg.cholesky(np.atleast_2d(noise_cov))
    m = L.shape[0]
    p = coefs.shape[0]
    if p == 0:
        return StateSpace.static(L)
    top = np.hstack(list(coefs))
    A = np.zeros((m * p, m * p))
    A[:m] = top
    A[m:, :-m] = np.eye(m * (p - 1))
    B = np.zeros((m * p, m))
    B[:m] = L
    return StateSpace(A, B, top, L)


def _companion_radius(coefs: np.ndarray) -> float:
    p, m, _ = coefs.shape
    if p == 0:
        return 0.0
    A = np.zeros((m * p, m * p))
    A[:m] = np.hstack(list(coefs))
    A[m:, :-m] = np.eye(m * (p - 1))
    return spectral_radius(A)


def fit_ar_prior(data, order: int, max_radius: float = 0.99) -> ARFit:
    """Least-squares vector AR fit used as a coarse prior.

    The process is taken as zero mean (no centering). An unstable estimate is
    pulled inside the disk by scaling ``A_i -> c^i A_i`` (all roots scale by
    ``c``), so the companion radius becomes ``max_radius``. A rank-deficient
    regression, or one with a singular innovation covariance, falls back
    to order ``p - 1``.
    """
    y = np.asarray(data, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    T, m = y.shape
    p = int(order)
    if p < 0:
        raise ValueError("AR order must be nonnegative")
    if T <= m * p + m:
        raise ValueError(f"need more than {m * p + m} samples for an order-{p} fit")
    while p > 0:
        X = np.hstack([y[p - 1 - i:T - 1 - i] for i in range(p)])
        Yt = y[p:]
        if np.linalg.matrix_rank(X) < X.shape[1]:
            p -= 1
            continue
        beta, *_ = np.linalg.lstsq(X, Yt, rcond=None)
        coefs = beta.T.reshape(m, p, m).transpose(1, 0, 2)
        resid = Yt - X @ beta
        noise = resid.T @ resid / resid.shape[0]
        # a perfectly predictable fit has a singular innovation covariance
        w = np.linalg.eigvalsh(0.5 * (noise + noise.T))
        if w[0] <= 1e-10 * max(np.trace(y.T @ y) / T, 1e-300):
            p -= 1
            continue
        break
    else:
        coefs = np.zeros((0, m, m))
        noise = y.T @ y / T
    shrunk = False
    rho = _companion_radius(coefs)
    if rho >= max_radius:
        c = max_radius / rho * (1 - 1e-12)
        coefs = coefs * (c ** np.arange(1, p + 1))[:, None, None]
        shrunk = True
    noise = 0.5 * (noise + noise.T)
    W = ar_factor(coefs, noise)
    return ARFit(coefs, noise, FactorDensity(W), p, shrunk)


# --------------------------------------------------------------------------
# Grid CSV layout: theta, then (Re, Im) for each entry in row-major order
# --------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def grid_to_csv(density: GridDensity) -> str:
    m = density.m
    header = ["theta"]
    for i in range(m):
        for j in range(m):
            header += [f"re_{i + 1}{j + 1}", f"im_{i + 1}{j + 1}"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    vals = density.values.reshape(density.theta.size, m * m)
    for th, row in zip(density.theta, vals):
        cells = [_fmt(th)]
        for v in row:
            cells += [_fmt(v.real), _fmt(v.imag)]
        w.writerow(cells)
    return buf.getvalue()


def grid_from_csv(text: str) -> GridDensity:
    rows = list(csv.reader(io.StringIO(text)))
    if rows and rows[0] and rows[0][0] == "theta":
        rows = rows[1:]
    arr = np.array([[float(c) for c in r] for r in rows if r], dtype=float)
    ncols = arr.shape[1] - 1
    m = int(round(math.sqrt(ncols // 2)))
    if 2 * m * m != ncols:
        raise ValueError(f"cannot infer matrix size from {ncols} value columns")
    vals = arr[:, 1::2] + 1j * arr[:, 2::2]
    return GridDensity(arr[:, 0], vals.reshape(-1, m, m))


def write_grid_csv(density: GridDensity, path) -> None:
    Path(path).write_text(grid_to_csv(density))


def read_grid_csv(path) -> GridDensity:
    return grid_from_csv(Path(path).read_text())


def sample_on_grid(phi: SpectralDensity, M: int = DEFAULT_GRID) -> GridDensity:
    th = circle_grid(M)
    vals = phi.evaluate(th)
    vals = 0.5 * (vals + np.conj(np.swapaxes(vals, -1, -2)))
    return GridDensity(th, vals)
