"""The moment operator ``Gamma(Phi) = int G Phi G^*`` and the geometry of its range.

The range of Gamma is the subspace of symmetric ``Sigma`` for which
``Sigma - A Sigma A^T = B H + H^T B^T`` has a solution ``H``. This module
builds bases of that subspace, projects onto it, and maps a sample
covariance to the closest feasible one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la

from .lti import LyapunovSolver, StateSpace, output_covariance, series, solve_discrete_lyapunov
from .spectra import FactorDensity, GridDensity, SpectralDensity, circle_grid

FEASIBILITY_RTOL = 1e-9
BASIS_DROP_TOL = 1e-10
QUADRATIC_DECREMENT = 1e-10


class InfeasibleCovariance(ValueError):
    """``Sigma`` is not in the range of Gamma; ``residual`` is the LS misfit."""

    def __init__(self, residual: float, message: str | None = None):
        super().__init__(message or f"covariance is not in Range(Gamma) (residual {residual:.3e})")
        self.residual = residual


class ProjectionError(RuntimeError):
    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def gamma_apply(G: StateSpace, phi: SpectralDensity, grid: int | None = None) -> np.ndarray:
    """``int G Phi G^*`` (normalized measure) as a real symmetric matrix.

    Factor densities are handled exactly: the cascade ``G W`` driven by unit
    white noise has output covariance ``Gamma(W W^*)``. Grid densities use
    the rectangle rule on their own grid.
    """
    if isinstance(phi, FactorDensity):
        return _sym(output_covariance(series(phi.W, G)))
    if isinstance(phi, GridDensity):
        th, vals = phi.theta, phi.values
    else:
        th = circle_grid(grid or 2048)
        vals = phi.evaluate(th)
    Gv = G.transfer(th)
    S = np.mean(Gv @ vals @ np.conj(np.swapaxes(Gv, -1, -2)), axis=0)
    return _sym(np.real(S))


@dataclass(frozen=True)
class FeasibleCovariance:
    """A positive definite ``Sigma`` with its witness ``H``."""

    Sigma: np.ndarray
    H: np.ndarray
    residual: float


def _feasibility_operator(B: np.ndarray) -> np.ndarray:
    """Matrix of ``H -> B H + H^T B^T`` acting on row-major ``vec(H)``."""
    n, m = B.shape
    cols = []
    for k in range(m * n):
        E = np.zeros(m * n)
        E[k] = 1.0
        H = E.reshape(m, n)
        cols.append((B @ H + H.T @ B.T).ravel())
    return np.array(cols).T


def feasibility_residual(A, B, Sigma) -> tuple[np.ndarray, float]:
    """Least-squares ``H`` and the Frobenius misfit of the feasibility equation."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    Sigma = np.asarray(Sigma, dtype=float)
    rhs = (Sigma - A @ Sigma @ A.T).ravel()
    K = _feasibility_operator(B)
    h, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    res = float(np.linalg.norm(K @ h - rhs))
    return h.reshape(B.shape[1], n), res


def feasibility_solve(A, B, Sigma) -> np.ndarray:
    """Witness ``H`` of ``Sigma - A Sigma A^T = B H + H^T B^T``.

    Raises
    ------
    InfeasibleCovariance
        If the least-squares residual exceeds ``1e-9 (1 + ||Sigma||_F)``.
    """
    H, res = feasibility_residual(A, B, Sigma)
    if res > FEASIBILITY_RTOL * (1.0 + np.linalg.norm(Sigma)):
        raise InfeasibleCovariance(res)
    return H


def is_feasible(A, B, Sigma) -> bool:
    _, res = feasibility_residual(A, B, Sigma)
    return res <= FEASIBILITY_RTOL * (1.0 + np.linalg.norm(Sigma))


@dataclass(frozen=True)
class GammaBasis:
    """Bases of ``Range(Gamma)`` for a pair ``(A, B)``.

    ``ortho`` is orthonormal in ``<M, N> = tr(M N)``; ``mats`` spans the same
    subspace with positive definite elements. ``anchor`` is the positive
    definite element used for the shift: the identity when it lies in the
    range, otherwise the reachability Gramian.
    """

    A: np.ndarray
    B: np.ndarray
    ortho: np.ndarray
    mats: np.ndarray
    anchor: np.ndarray
    gram: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return self.mats.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def project(self, M: np.ndarray) -> np.ndarray:
        return project_range(M, self)

    def combine(self, coords: np.ndarray) -> np.ndarray:
        """``sum_i c_i Sigma_i`` over the positive definite basis."""
        return np.tensordot(np.asarray(coords, dtype=float), self.mats, axes=1)

    def coords(self, M: np.ndarray) -> np.ndarray:
        """Coordinates of (the projection of) ``M`` in the PD basis."""
        rhs = np.einsum("kij,ij->k", self.mats, M)
        return np.linalg.solve(self.gram, rhs)

    def inner(self, M: np.ndarray) -> np.ndarray:
        """``<Sigma_i, M>`` for every PD basis element."""
        return np.einsum("kij,ij->k", self.mats, M)


def range_generators(A, B) -> np.ndarray:
    """Solutions of ``S - A S A^T = B H_k + H_k^T B^T`` for the canonical ``H_k``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    m = B.shape[1]
    rhs = np.empty((m * n, n, n))
    for k in range(m * n):
        H = np.zeros(m * n)
        H[k] = 1.0
        H = H.reshape(m, n)
        rhs[k] = B @ H + H.T @ B.T
    return _sym(LyapunovSolver(A).solve(rhs))


def _orthonormal_span(vecs: np.ndarray, tol: float) -> np.ndarray:
    """Orthonormal basis (rows) of the row span, via column-pivoted QR."""
    if vecs.shape[0] == 0:
        return vecs
    Q, R, _ = la.qr(vecs.T, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > tol * d[0])) if d.size and d[0] > 0 else 0
    return Q[:, :rank].T


def range_gamma_basis(A, B, anchor: np.ndarray | None = None) -> GammaBasis:
    """Basis of ``Range(Gamma)`` made of positive definite matrices.

    Generators come from one Lyapunov solve per canonical ``H_k``; an
    orthonormal basis is extracted with drop tolerance ``1e-10``, with the
    anchor ``K`` as first direction and the rest orthogonal to it. Each
    remaining direction ``F_i`` becomes ``F_i + a_i K`` with
    ``a_i = 1 + max(0, -lambda_min(K^{-1/2} F_i K^{-1/2}))``. An explicit
    ``anchor`` overrides the automatic choice; it is projected onto the
    span of the generators and must stay positive definite.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    gens = range_generators(A, B)
    flat = gens.reshape(gens.shape[0], -1)
    span = _orthonormal_span(flat, BASIS_DROP_TOL)
    if anchor is None:
        I = np.eye(n)
        resid = I.ravel() - span.T @ (span @ I.ravel())
        if np.linalg.norm(resid) <= 1e-9 * np.sqrt(n):
            anchor = I
        else:
            anchor = _sym(reachability_like(A, B))
    # an anchor that lies in the range only up to roundoff (the identity after
    # whitening an ill-conditioned Sigma) would tilt every basis direction
    anchor = np.asarray(anchor, dtype=float)
    anchor = _sym((span.T @ (span @ anchor.ravel())).reshape(n, n))
    k0 = anchor.ravel() / np.linalg.norm(anchor)
    rest = span - np.outer(span @ k0, k0)
    rest = _orthonormal_span(rest, BASIS_DROP_TOL)
    rest = rest[: span.shape[0] - 1]
    ortho = np.vstack([k0[None, :], rest]).reshape(-1, n, n)
    ortho = _sym(ortho)
    w, V = np.linalg.eigh(anchor)
    K_ih = (V / np.sqrt(w)) @ V.T
    mats = [anchor.copy()]
    for F in ortho[1:]:
        lam_min = np.linalg.eigvalsh(K_ih @ F @ K_ih)[0]
        mats.append(F + (1.0 + max(0.0, -lam_min)) * anchor)
    mats = np.array(mats)
    gram = np.einsum("aij,bij->ab", mats, mats)
    return GammaBasis(A, B, ortho, mats, anchor, gram)


def reachability_like(A, B) -> np.ndarray:
    """``Gamma`` of unit white noise, a positive definite point of the range."""
    return solve_discrete_lyapunov(A, B @ B.T)


def project_range(M: np.ndarray, basis: GammaBasis) -> np.ndarray:
    """Orthogonal projection onto ``Range(Gamma)`` in the trace inner product."""
    M = np.asarray(M, dtype=float)
    c = np.einsum("kij,ij->k", basis.ortho, M)
    return np.tensordot(c, basis.ortho, axes=1)


def covariance_kl(Sigma: np.ndarray, Sigma_hat: np.ndarray) -> float:
    """``0.5 [log det(Sigma^{-1} Sigma_hat) + tr(Sigma_hat^{-1} Sigma) - n]``."""
    n = Sigma.shape[0]
    s1, l1 = np.linalg.slogdet(Sigma)
    s2, l2 = np.linalg.slogdet(Sigma_hat)
    if s1 <= 0 or s2 <= 0:
        raise np.linalg.LinAlgError("covariance_kl needs positive definite matrices")
    return 0.5 * (l2 - l1 + np.trace(np.linalg.solve(Sigma_hat, Sigma)) - n)


def _pd_cholesky(S: np.ndarray):
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        return None


def project_covariance(Sigma_hat: np.ndarray, basis: GammaBasis, tol: float = 1e-12,
                       max_iter: int = 200) -> FeasibleCovariance:
    """Closest feasible covariance in the Gaussian KL sense.

    Minimizes ``covariance_kl(Sigma, Sigma_hat)`` over positive definite
    ``Sigma`` in ``Range(Gamma)``. The KL divergence is invariant under
    congruence, so the problem is solved for the whitened pair
    ``(T A T^{-1}, T B)`` with ``T = Sigma_hat^{-1/2}``, where the target
    ``H = T Sigma_hat T`` is the identity up to roundoff. Damped Newton in
    orthonormal coordinates on ``f(c) = -log det S(c) + tr(H^{-1} S(c))``:
    gradient ``tr[(H^{-1} - S^{-1}) E_i]``, Hessian ``tr[S^{-1} E_i S^{-1} E_j]``.
    Stops when the gradient norm is below ``tol``. Once the Newton decrement
    falls under ``1e-10`` the objective can no longer certify descent, so full
    steps are taken while the gradient keeps shrinking.
    """
    Sh = _sym(np.asarray(Sigma_hat, dtype=float))
    if _pd_cholesky(Sh) is None:
        raise ValueError("sample covariance must be positive definite")
    prob = normalize_problem(basis.A, basis.B, Sh)
    E = range_gamma_basis(prob.A, prob.B).ortho
    n = Sh.shape[0]
    Hi = _sym(np.linalg.inv(prob.target))
    g_const = np.einsum("kij,ij->k", E, Hi)

    def f(c):
        S = np.tensordot(c, E, axes=1)
        L = _pd_cholesky(S)
        if L is None:
            return np.inf, S
        return -2 * np.sum(np.log(np.diag(L))) + float(np.sum(Hi * S)), S

    c = np.einsum("kii->k", E)      # projection of the identity
    fc, S = f(c)
    if not np.isfinite(fc):
        K = _sym(reachability_like(prob.A, prob.B))
        c = np.einsum("kij,ij->k", E, K) * (n / np.trace(K))
        fc, S = f(c)
    trace = []
    best = None
    for it in range(max_iter):
        Si = np.linalg.inv(S)
        SiE = Si @ E
        grad = g_const - np.einsum("kii->k", SiE)
        gnorm = float(np.linalg.norm(grad))
        hess = np.einsum("aij,bji->ab", SiE, SiE)
        step = -np.linalg.solve(hess, grad)
        decrement = float(-grad @ step)
        trace.append({"iter": it, "f": float(fc), "grad_norm": gnorm, "decrement": decrement})
        if best is not None and gnorm >= best[0]:
            # roundoff stagnation in the quadratic phase: keep the best iterate
            c, S = best[1], best[2]
            break
        if gnorm <= tol:
            break
        if decrement <= QUADRATIC_DECREMENT:
            # f no longer resolves the decrease; full Newton steps are safe here
            best = (gnorm, c, S)
            c = c + step
            fc, S = f(c)
            if not np.isfinite(fc):
                c, S = best[1], best[2]
                break
            continue
        t = 1.0
        for _ in range(60):
            fn, Sn = f(c + t * step)
            if fn <= fc - 0.25 * t * decrement:
                break
            t *= 0.5
        else:
            raise ProjectionError("covariance projection line search failed", trace)
        c = c + t * step
        fc, S = fn, Sn
    else:
        raise ProjectionError("covariance projection did not converge", trace)
    S = prob.unwhiten(S)
    H, res = feasibility_residual(basis.A, basis.B, S)
    if res > FEASIBILITY_RTOL * (1.0 + np.linalg.norm(S)):
        raise InfeasibleCovariance(res, "projected covariance failed the feasibility check")
    return FeasibleCovariance(S, H, res)


@dataclass(frozen=True)
class NormalizedProblem:
    """Coordinates in which the moment constraint reads ``Gamma(Phi) = I``.

    With ``Sigma = V diag(w) V^T`` every congruence by ``Sigma^{+-1/2}`` is
    applied as ``V (D o (V^T X V)) V^T`` with an elementwise scaling ``D``.
    Each entry then keeps its relative accuracy, so the whitened data are
    an exact image of a problem within a few ulps of the original one.
    """

    A: np.ndarray
    B: np.ndarray
    Sigma: np.ndarray
    sqrt: np.ndarray
    inv_sqrt: np.ndarray
    V: np.ndarray = field(repr=False)
    w: np.ndarray = field(repr=False)

    @property
    def bank(self) -> StateSpace:
        return StateSpace.filterbank(self.A, self.B)

    def _congruence(self, X: np.ndarray, power: float) -> np.ndarray:
        d = self.w ** power
        V = self.V
        return _sym(V @ ((V.T @ X @ V) * np.outer(d, d)) @ V.T)

    @property
    def target(self) -> np.ndarray:
        """``Sigma^{-1/2} Sigma Sigma^{-1/2}`` as computed: the identity up to roundoff."""
        return self._congruence(self.Sigma, -0.5)

    def whiten(self, X: np.ndarray) -> np.ndarray:
        """``Sigma^{-1/2} X Sigma^{-1/2}``."""
        return self._congruence(np.asarray(X, dtype=float), -0.5)

    def unwhiten(self, X: np.ndarray) -> np.ndarray:
        """``Sigma^{1/2} X Sigma^{1/2}``."""
        return self._congruence(np.asarray(X, dtype=float), 0.5)

    def lam_to_original(self, lam_n: np.ndarray) -> np.ndarray:
        return self.whiten(lam_n)

    def lam_to_normalized(self, lam: np.ndarray) -> np.ndarray:
        return self.unwhiten(lam)


def normalize_problem(A, B, Sigma) -> NormalizedProblem:
    """``A' = S^{-1/2} A S^{1/2}``, ``B' = S^{-1/2} B`` for ``S = Sigma``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Sigma = _sym(np.asarray(Sigma, dtype=float))
    w, V = np.linalg.eigh(Sigma)
    if w[0] <= 0:
        raise ValueError("Sigma must be positive definite")
    sw, isw = np.sqrt(w), 1.0 / np.sqrt(w)
    sq = (V * sw) @ V.T
    isq = (V * isw) @ V.T
    An = V @ ((V.T @ A @ V) * np.outer(isw, sw)) @ V.T
    Bn = V @ (isw[:, None] * (V.T @ B))
    return NormalizedProblem(An, Bn, Sigma, sq, isq, V, w)


def whitened_target(prob: NormalizedProblem, basis: GammaBasis) -> np.ndarray:
    """Element ``X`` of the whitened range closest to ``Sigma`` after unwhitening.

    Minimizes ``||Sigma - Sigma^{1/2} X Sigma^{1/2}||_F``. Rounding leaves
    ``Sigma`` feasible only to ``eps ||Sigma||``, which after whitening is
    ``eps cond(Sigma)``; measuring the fit in the original norm keeps the
    moment constraint accurate where it is evaluated.
    """
    F = np.array([prob.unwhiten(E) for E in basis.ortho])
    c, *_ = np.linalg.lstsq(F.reshape(len(F), -1).T, prob.Sigma.ravel(), rcond=None)
    return _sym(np.tensordot(c, basis.ortho, axes=1))
