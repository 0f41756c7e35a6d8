"""Spectral factorization of ``Q(z) = I + G1^*(z) Lam G1(z)`` via a Riccati equation.

For a stable, strictly proper ``G1 = C1 (zI - A1)^{-1} B1`` the stabilizing
solution ``P`` of

    P = A1^T P A1 - A1^T P B1 (B1^T P B1 + I)^{-1} B1^T P A1 + C1^T Lam C1

gives the outer factor ``Q = Delta^* Delta``. From ``P`` everything the dual
solver needs follows in closed form: ``int log det Q``, the covariance ``Y``
and the Hessian images ``Y_k``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lti import LyapunovSolver, StateSpace, spectral_radius

DARE_RTOL = 1e-9
SDA_MAX_ITER = 80


@dataclass(frozen=True)
class NotFactorizable:
    """``Q`` admits no outer factorization: ``Lam`` is outside ``L_+``."""

    reason: str

    def __bool__(self):
        return False


@dataclass(frozen=True)
class RiccatiCertificate:
    """Stabilizing DARE solution and the quantities derived from it."""

    G1: StateSpace
    lam: np.ndarray
    P: np.ndarray
    S: np.ndarray           # B1^T P B1 + I
    S_half: np.ndarray
    S_inv_half: np.ndarray
    K: np.ndarray           # S^{-1} B1^T P A1
    Z: np.ndarray           # closed loop A1 - B1 K
    residual: float

    @property
    def is_pd(self) -> bool:
        """Whether ``P`` is positive definite (diagnostic only)."""
        return bool(np.linalg.eigvalsh(self.P)[0] > 0) if self.P.size else False


def dare_residual(A, B, Q, P) -> np.ndarray:
    S = B.T @ P @ B + np.eye(B.shape[1])
    return A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(S, B.T @ P @ A) + Q - P


def _sda(A, G, H, tol=1e-14, max_iter=SDA_MAX_ITER):
    """Structure-preserving doubling; returns the limit of ``H_k`` or None."""
    n = A.shape[0]
    I = np.eye(n)
    Ak, Gk, Hk = A.copy(), G.copy(), H.copy()
    for _ in range(max_iter):
        W = I + Gk @ Hk
        try:
            WA = np.linalg.solve(W, Ak)
            WG = np.linalg.solve(W, Gk)
        except np.linalg.LinAlgError:
            return None
        H_new = Hk + Ak.T @ Hk @ WA
        G_new = Gk + Ak @ WG @ Ak.T
        A_new = Ak @ WA
        if not (np.all(np.isfinite(H_new)) and np.all(np.isfinite(A_new))):
            return None
        H_new = 0.5 * (H_new + H_new.T)
        G_new = 0.5 * (G_new + G_new.T)
        diff = np.linalg.norm(H_new - Hk)
        Ak, Gk, Hk = A_new, G_new, H_new
        if diff <= tol * max(1.0, np.linalg.norm(Hk)) or np.linalg.norm(Ak) < 1e-300:
            return Hk
    return Hk


def _gain(A, B, P):
    S = B.T @ P @ B + np.eye(B.shape[1])
    K = np.linalg.solve(S, B.T @ P @ A)
    return S, K


def _newton_polish(A, B, Q, P, steps=2):
    """Hewer iterations from ``P``; kept only while the residual improves."""
    best = P
    best_res = np.linalg.norm(dare_residual(A, B, Q, P))
    for _ in range(steps):
        try:
            S, K = _gain(A, B, best)
            Z = A - B @ K
            if spectral_radius(Z) >= 1.0:
                break
            Pn = LyapunovSolver(Z).solve(Q + K.T @ K, transpose=True)
        except (np.linalg.LinAlgError, ValueError):
            break
        Pn = 0.5 * (Pn + Pn.T)
        res = np.linalg.norm(dare_residual(A, B, Q, Pn))
        if not res < best_res:
            break
        best, best_res = Pn, res
    return best


def solve_dare(G1: StateSpace, lam: np.ndarray) -> RiccatiCertificate | NotFactorizable:
    """Stabilizing solution of the Riccati equation for ``Q = I + G1^* lam G1``.

    Doubling iteration followed by Newton (Hewer) polishing. The result is
    accepted when the relative residual is below ``1e-9``, the closed loop
    is stable and ``B1^T P B1 + I`` is positive definite; otherwise a
    :class:`NotFactorizable` value is returned.
    """
    A, B, C = G1.A, G1.B, G1.C
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    lam = 0.5 * (lam + lam.T)
    n1, p = B.shape
    Qw = C.T @ lam @ C
    Qw = 0.5 * (Qw + Qw.T)
    if n1 == 0:
        P = np.zeros((0, 0))
    else:
        P = _sda(A, B @ B.T, Qw)
        if P is None:
            return NotFactorizable("doubling iteration broke down")
        P = _newton_polish(A, B, Qw, P)
    S, K = _gain(A, B, P) if n1 else (np.eye(p), np.zeros((p, 0)))
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if w[0] <= 1e-12 * max(1.0, w[-1]):
        return NotFactorizable(f"B1^T P B1 + I not positive definite (min eig {w[0]:.3e})")
    Z = A - B @ K
    rho = spectral_radius(Z)
    if rho >= 1.0:
        return NotFactorizable(f"closed loop not stable (spectral radius {rho:.6f})")
    res = float(np.linalg.norm(dare_residual(A, B, Qw, P))) if n1 else 0.0
    if res > DARE_RTOL * (1.0 + np.linalg.norm(P) + np.linalg.norm(Qw)):
        return NotFactorizable(f"Riccati residual {res:.3e} too large")
    S_half = (V * np.sqrt(w)) @ V.T
    S_inv_half = (V / np.sqrt(w)) @ V.T
    return RiccatiCertificate(G1, lam, P, S, S_half, S_inv_half, K, Z, res)


def in_L_plus(G1: StateSpace, lam: np.ndarray) -> bool:
    """Membership of ``lam`` in ``L_+`` decided by solvability of the DARE."""
    return isinstance(solve_dare(G1, lam), RiccatiCertificate)


def spectral_factor_delta(G1: StateSpace, cert: RiccatiCertificate) -> StateSpace:
    """Outer factor ``Delta`` with ``Delta^* Delta = I + G1^* lam G1``.

    ``Delta(z) = S^{-1/2} B1^T P A1 (zI - A1)^{-1} B1 + S^{1/2}``.
    """
    C = cert.S_inv_half @ G1.B.T @ cert.P @ G1.A
    return StateSpace(G1.A, G1.B, C, cert.S_half)


def delta_inverse(G1: StateSpace, cert: RiccatiCertificate) -> StateSpace:
    """``Delta^{-1}``, stable with state matrix equal to the closed loop ``Z``."""
    return StateSpace(cert.Z, G1.B @ cert.S_inv_half, -cert.K, cert.S_inv_half)


def logdet_integral(G1: StateSpace, cert: RiccatiCertificate) -> float:
    """``int log det(I + G1^* lam G1) = log det(B1^T P B1 + I)``."""
    return float(np.linalg.slogdet(cert.S)[1])


@dataclass
class _Lags:
    """Covariance lags ``t_k = C Z^k R C^T`` of ``W_Y = C (zI - Z)^{-1} B S^{-1/2}``."""

    C: np.ndarray
    R: np.ndarray
    RC: np.ndarray
    solver: LyapunovSolver


def _lags(G1: StateSpace, cert: RiccatiCertificate) -> _Lags:
    solver = LyapunovSolver(cert.Z)
    Bt = G1.B @ cert.S_inv_half
    R = solver.solve(Bt @ Bt.T)
    return _Lags(G1.C, R, R @ G1.C.T, solver)


def compute_Y(G1: StateSpace, cert: RiccatiCertificate) -> np.ndarray:
    """``Y = int G1 Q^{-1} G1^* - I = C1 R C1^T - I``.

    ``R`` solves ``R - Z R Z^T = B1 S^{-1} B1^T``.
    """
    L = _lags(G1, cert)
    Y = L.C @ L.R @ L.C.T - np.eye(L.C.shape[0])
    return 0.5 * (Y + Y.T)


def compute_Yk(G1: StateSpace, cert: RiccatiCertificate, sigmas: np.ndarray,
               lags: _Lags | None = None) -> np.ndarray:
    """``Y_k = int T Sigma_k T`` with ``T = G1 Q^{-1} G1^* = W_Y W_Y^*``.

    ``T`` has Laurent coefficients ``t_j = C Z^j R C^T`` (``j >= 0``) and
    ``t_{-j} = t_j^T``, so by Parseval

        Y_k = sum_{j>=0} t_j Sigma_k t_j^T + sum_{j>=1} t_j^T Sigma_k t_j
            = C X1 C^T + U^T (X2 - C^T Sigma_k C) U,

    with ``U = R C^T``, ``X1 - Z X1 Z^T = U Sigma_k U^T`` and
    ``X2 - Z^T X2 Z = C^T Sigma_k C``. Accepts one matrix or a stack.
    """
    L = lags or _lags(G1, cert)
    sig = np.asarray(sigmas, dtype=float)
    single = sig.ndim == 2
    sig = np.atleast_3d(sig) if not single else sig[None]
    C, U = L.C, L.RC
    rhs1 = U @ sig @ U.T
    rhs2 = C.T @ sig @ C
    X1 = L.solver.solve(rhs1)
    X2 = L.solver.solve(rhs2, transpose=True)
    Y = C @ X1 @ C.T + U.T @ (X2 - rhs2) @ U
    Y = 0.5 * (Y + np.swapaxes(Y, -1, -2))
    return Y[0] if single else Y
