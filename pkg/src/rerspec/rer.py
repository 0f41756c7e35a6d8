"""Dual Newton solver for the relative-entropy-rate spectrum approximation.

Given a filter bank ``G``, a prior ``Psi = W_Psi W_Psi^*`` and a feasible
state covariance ``Sigma``, find the density closest to ``Psi`` in the
relative-entropy-rate distance among those with ``int G Phi G^* = Sigma``.
The minimizer has the form ``Phi = W_Psi (I + G1^* Lam G1)^{-1} W_Psi^*``
with ``G1 = G W_Psi``; the multiplier ``Lam`` minimizes the convex dual
``J(Lam) = tr Lam - int log det(I + G1^* Lam G1)`` over ``Range(Gamma)``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .factor import (NotFactorizable, RiccatiCertificate, _lags, compute_Y, compute_Yk,
                     logdet_integral, solve_dare)
from .gamma import (GammaBasis, InfeasibleCovariance, feasibility_solve, gamma_apply,
                    normalize_problem, project_range, range_gamma_basis,
                    whitened_target)
from .lti import StateSpace, series
from .spectra import FactorDensity

log = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    """The Newton iteration stopped without meeting the gradient tolerance."""

    def __init__(self, message: str, history: list):
        super().__init__(message)
        self.history = history


class LineSearchError(ConvergenceError):
    pass


@dataclass
class SolverOptions:
    tol: float = 1e-9
    max_iter: int = 100
    armijo_alpha: float = 0.3
    max_halvings: int = 60
    grid_size: int = 2048

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DualIterate:
    coords: np.ndarray
    lam: np.ndarray
    cert: RiccatiCertificate
    J: float
    grad: np.ndarray
    iteration: int = 0

    @property
    def grad_norm(self) -> float:
        return float(np.linalg.norm(self.grad))


@dataclass(frozen=True)
class DegreeReport:
    """Realized sizes of the estimate versus the a-priori bound.

    Degrees of densities count both the causal and anticausal halves, so a
    density with an ``k``-state factor has degree ``2k``.
    """

    factor_states: int
    prior_factor_states: int
    bank_states: int

    @property
    def degree(self) -> int:
        return 2 * self.factor_states

    @property
    def prior_degree(self) -> int:
        return 2 * self.prior_factor_states

    @property
    def bound(self) -> int:
        return self.prior_degree + 2 * self.bank_states

    @property
    def within_bound(self) -> bool:
        return self.degree <= self.bound

    def to_dict(self) -> dict:
        return {"factor_states": self.factor_states, "degree": self.degree,
                "prior_degree": self.prior_degree, "bank_states": self.bank_states,
                "bound": self.bound}


@dataclass
class RerSolution:
    lam: np.ndarray
    lam_normalized: np.ndarray
    coords: np.ndarray
    spectrum: FactorDensity
    degree: DegreeReport
    residual: float
    relative_residual: float
    iterations: int
    dual_value: float
    history: list = field(default_factory=list)
    options: SolverOptions = field(default_factory=SolverOptions)
    wall_time: float = 0.0

    def summary(self) -> dict:
        return {"iterations": self.iterations, "dual_value": self.dual_value,
                "residual": self.residual, "relative_residual": self.relative_residual,
                "degree": self.degree.to_dict(), "wall_time": self.wall_time}


def _linear_term(lam: np.ndarray, target: np.ndarray | None) -> float:
    return float(np.trace(lam)) if target is None else float(np.sum(lam * target))


def _defect(Y: np.ndarray, target: np.ndarray | None) -> np.ndarray:
    """``int G1 Q^{-1} G1^* - target`` given ``Y = int G1 Q^{-1} G1^* - I``."""
    return Y if target is None else Y - (target - np.eye(Y.shape[0]))


def dual_value(lam: np.ndarray, cert: RiccatiCertificate,
               target: np.ndarray | None = None) -> float:
    """``J(Lam) = tr(Lam T) - log det(B1^T P B1 + I)`` (normalized problem).

    The moment target ``T`` is the identity unless given.
    """
    return _linear_term(lam, target) - logdet_integral(cert.G1, cert)


def dual_gradient(lam: np.ndarray, cert: RiccatiCertificate, basis: GammaBasis,
                  Y: np.ndarray | None = None, target: np.ndarray | None = None) -> np.ndarray:
    """Gradient of ``J`` in ``Range(Gamma)``: ``-P_range(Y + I - T)``."""
    if Y is None:
        Y = compute_Y(cert.G1, cert)
    return -project_range(_defect(Y, target), basis)


@dataclass
class NewtonStep:
    direction: np.ndarray     # Delta Lam
    alpha: np.ndarray         # coordinates in the PD basis
    hessian: np.ndarray       # M_jk = <Sigma_j, Y_k>
    rhs: np.ndarray           # y_j = <Sigma_j, Y>
    slope: float              # <grad, Delta Lam>


def newton_direction(cert: RiccatiCertificate, basis: GammaBasis,
                     Y: np.ndarray | None = None,
                     target: np.ndarray | None = None) -> NewtonStep:
    """Solve the Newton system in the positive definite basis.

    ``M alpha = y`` with ``M_jk = <Sigma_j, Y_k>`` (the Hessian form on
    basis pairs) and ``y_j = <Sigma_j, Y + I - T>``; the step is
    ``sum_k alpha_k Sigma_k``.
    """
    G1 = cert.G1
    lags = _lags(G1, cert)
    if Y is None:
        Y = lags.C @ lags.R @ lags.C.T - np.eye(G1.n_outputs)
        Y = 0.5 * (Y + Y.T)
    Yk = compute_Yk(G1, cert, basis.mats, lags=lags)
    M = np.einsum("jab,kab->jk", basis.mats, Yk)
    M = 0.5 * (M + M.T)
    y = basis.inner(_defect(Y, target))
    try:
        c = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError(
            "Newton system is not positive definite: the basis of Range(Gamma) is defective")
    alpha = np.linalg.solve(c.T, np.linalg.solve(c, y))
    direction = basis.combine(alpha)
    return NewtonStep(direction, alpha, M, y, float(-alpha @ y))


@dataclass
class StepResult:
    t: float
    coords: np.ndarray
    lam: np.ndarray
    cert: RiccatiCertificate
    J: float
    halvings: int
    roundoff: bool = False


# Below this predicted decrease (relative to 1 + |J|) the Armijo test
# compares numbers at the resolution of double precision.
ROUNDOFF_DECREASE = 1e3 * np.finfo(float).eps

# A constraint residual this small (relative, original coordinates) is exact
# to working precision; the whitened gradient then only measures roundoff.
EXACT_RTOL = 100 * np.finfo(float).eps
# Defect-correction passes allowed once the whitened gradient has converged.


def _grad_norm(cert: RiccatiCertificate, basis: GammaBasis,
               target: np.ndarray | None = None) -> float:
    return float(np.linalg.norm(project_range(_defect(compute_Y(cert.G1, cert), target), basis)))


def backtrack(G1: StateSpace, basis: GammaBasis, coords: np.ndarray, alpha: np.ndarray,
              J: float, slope: float, armijo: float = 0.3, max_halvings: int = 60,
              grad_norm: float | None = None,
              target: np.ndarray | None = None) -> StepResult:
    """Halve the step until the multiplier stays factorizable and Armijo holds.

    When the predicted decrease ``-slope`` is at roundoff level and the
    current gradient norm is supplied, a trial step is accepted if it
    reduces the gradient norm instead.

    Raises :class:`LineSearchError` after ``max_halvings`` halvings.
    """
    flat = grad_norm is not None and -slope <= ROUNDOFF_DECREASE * (1.0 + abs(J))
    t = 1.0
    for k in range(max_halvings + 1):
        c_new = coords + t * alpha
        lam_new = basis.combine(c_new)
        cert = solve_dare(G1, lam_new)
        if not isinstance(cert, NotFactorizable):
            J_new = dual_value(lam_new, cert, target)
            if flat:
                ok = _grad_norm(cert, basis, target) < grad_norm
            else:
                ok = J_new < J + armijo * t * slope
            if ok:
                return StepResult(t, c_new, lam_new, cert, J_new, k, flat)
        t *= 0.5
    raise LineSearchError("backtracking exhausted its halvings", [])


def optimal_factor(G1: StateSpace, W_psi: StateSpace, cert: RiccatiCertificate) -> StateSpace:
    """Minimal-size factor of ``W_Psi Q^{-1} W_Psi^*`` for ``G1 = G W_Psi``.

    ``G1`` must be the cascade ``series(W_Psi, G)`` so that the prior's
    state is the leading block of the cascade state. Then
    ``W_Psi Delta^{-1} = (Z, B1 S^{-1/2}, C_W - D_W K, D_W S^{-1/2})``
    with ``C_W = [C_Psi, 0]``.
    """
    nw = W_psi.n_states
    C_W = np.hstack([W_psi.C, np.zeros((W_psi.n_outputs, G1.n_states - nw))])
    D_W = W_psi.D
    return StateSpace(cert.Z, G1.B @ cert.S_inv_half, C_W - D_W @ cert.K, D_W @ cert.S_inv_half)


def _as_factor(prior) -> StateSpace:
    if isinstance(prior, FactorDensity):
        return prior.W
    if isinstance(prior, StateSpace):
        return prior
    raise TypeError("prior must be a FactorDensity or a StateSpace spectral factor")


def optimal_spectrum(lam: np.ndarray, G: StateSpace, prior) -> tuple[FactorDensity, DegreeReport]:
    """``Phi = [Psi^{-1} + G^* Lam G]^{-1}`` as a factor density with its degree report."""
    W_psi = _as_factor(prior)
    G1 = series(W_psi, G)
    cert = solve_dare(G1, lam)
    if isinstance(cert, NotFactorizable):
        raise ValueError(f"multiplier outside L_+: {cert.reason}")
    W = optimal_factor(G1, W_psi, cert)
    return FactorDensity(W), DegreeReport(W.n_states, W_psi.n_states, G.n_states)


def solve_rer(G: StateSpace, prior, Sigma: np.ndarray,
              opts: SolverOptions | None = None) -> RerSolution:
    """Solve the constrained spectrum approximation problem.

    Parameters
    ----------
    G
        Filter bank ``(zI - A)^{-1} B`` (``C = I``, ``D = 0``).
    prior
        Stable minimum-phase spectral factor ``W_Psi`` of the prior (or a
        :class:`FactorDensity`).
    Sigma
        Feasible positive definite state covariance.

    Notes
    -----
    Newton runs in whitened coordinates (``Sigma -> I``) until the gradient
    norm is below ``opts.tol``. For an ill-conditioned ``Sigma`` the whitened
    moment target is not ``I`` but the range element closest to ``Sigma`` in
    the original norm (:func:`whitened_target`), which keeps the relative
    residual near roundoff. An iterate whose original residual is already at
    roundoff level is accepted outright.

    Raises
    ------
    InfeasibleCovariance
        ``Sigma`` is not in ``Range(Gamma)``.
    ConvergenceError
        The gradient did not reach ``opts.tol`` within ``opts.max_iter``.
    """
    opts = opts or SolverOptions()
    t0 = time.perf_counter()
    W_psi = _as_factor(prior)
    Sigma = 0.5 * (np.asarray(Sigma, dtype=float) + np.asarray(Sigma, dtype=float).T)
    if np.linalg.eigvalsh(Sigma)[0] <= 0:
        raise ValueError("Sigma must be positive definite")
    feasibility_solve(G.A, G.B, Sigma)
    prob = normalize_problem(G.A, G.B, Sigma)
    n = G.n_states
    basis = range_gamma_basis(prob.A, prob.B, anchor=np.eye(n))
    G1 = series(W_psi, prob.bank)

    coords = np.zeros(basis.dim)
    lam = np.zeros((n, n))
    cert = solve_dare(G1, lam)
    # the whitened Sigma equals I only up to eps * cond(Sigma)
    target = whitened_target(prob, basis)
    J = dual_value(lam, cert, target)
    sigma_norm = float(np.linalg.norm(Sigma))
    history = []
    it = 0
    while True:
        Y = compute_Y(G1, cert)
        grad = dual_gradient(lam, cert, basis, Y=Y, target=target)
        gnorm = float(np.linalg.norm(grad))
        W = optimal_factor(G1, W_psi, cert)
        spectrum = FactorDensity(W)
        R = Sigma - gamma_apply(G, spectrum)
        rel = float(np.linalg.norm(R)) / sigma_norm
        record = {"iter": it, "J": J, "grad_norm": gnorm, "residual": rel}
        if rel <= EXACT_RTOL or gnorm <= opts.tol:
            history.append(record)
            break
        if it >= opts.max_iter:
            history.append(record)
            raise ConvergenceError(
                f"no convergence after {opts.max_iter} Newton steps (|grad| = {gnorm:.3e})", history)
        step = newton_direction(cert, basis, Y=Y, target=target)
        record["hessian_min_eig"] = float(np.linalg.eigvalsh(step.hessian)[0])
        try:
            res = backtrack(G1, basis, coords, step.alpha, J, step.slope,
                            opts.armijo_alpha, opts.max_halvings, grad_norm=gnorm, target=target)
        except LineSearchError as exc:
            history.append(record)
            raise LineSearchError(str(exc), history) from None
        record.update(step=res.t, halvings=res.halvings, decrement=-step.slope,
                      roundoff=res.roundoff)
        history.append(record)
        log.debug("iter %d J=%.12g |grad|=%.3e t=%g", it, J, gnorm, res.t)
        coords, lam, cert, J = res.coords, res.lam, res.cert, res.J
        it += 1

    degree = DegreeReport(W.n_states, W_psi.n_states, n)
    resid = float(np.linalg.norm(R))
    return RerSolution(
        lam=prob.lam_to_original(lam), lam_normalized=lam, coords=coords, spectrum=spectrum,
        degree=degree, residual=resid, relative_residual=resid / sigma_norm,
        iterations=it, dual_value=J, history=history, options=opts,
        wall_time=time.perf_counter() - t0)


__all__ = [
    "ConvergenceError", "DegreeReport", "DualIterate", "InfeasibleCovariance", "LineSearchError",
    "NewtonStep", "RerSolution", "SolverOptions", "backtrack", "dual_gradient", "dual_value",
    "newton_direction", "optimal_factor", "optimal_spectrum", "solve_rer",
]
