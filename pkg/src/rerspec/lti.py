"""Real discrete-time state-space algebra.

Everything here works on the quadruple ``(A, B, C, D)`` of a real LTI system
with transfer function ``C (zI - A)^{-1} B + D``. The filter bank
``G(z) = (zI - A)^{-1} B`` is the special case ``C = I``, ``D = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg as la

# Direct (Kronecker) Lyapunov solves are used up to this state dimension.
KRON_MAX_DIM = 64


class UnstableSystemError(ValueError):
    """Raised when an operation needs spectral radius < 1."""


class UnreachableError(ValueError):
    """Raised when a pair (A, B) has a singular reachability Gramian."""


@dataclass(frozen=True)
class StateSpace:
    """Real state-space realization ``x+ = A x + B u``, ``y = C x + D u``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        C = np.asarray(self.C, dtype=float)
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        n = A.shape[0] if A.size else 0
        if A.size == 0:
            A = np.zeros((0, 0))
        q, p = D.shape
        B = B.reshape(n, p)
        C = C.reshape(q, n)
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        for name, arr in (("A", A), ("B", B), ("C", C), ("D", D)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.D.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.D.shape[0]

    @property
    def spectral_radius(self) -> float:
        return spectral_radius(self.A)

    def is_stable(self) -> bool:
        return self.spectral_radius < 1.0

    def transfer(self, theta) -> np.ndarray:
        """Shorthand for :func:`eval_transfer`."""
        return eval_transfer(self, theta)

    @classmethod
    def static(cls, D) -> "StateSpace":
        """A memoryless gain (zero states)."""
        D = np.atleast_2d(np.asarray(D, dtype=float))
        q, p = D.shape
        return cls(np.zeros((0, 0)), np.zeros((0, p)), np.zeros((q, 0)), D)

    @classmethod
    def filterbank(cls, A, B) -> "StateSpace":
        """``G(z) = (zI - A)^{-1} B`` with the state as output."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
        n, m = B.shape
        return cls(A, B, np.eye(n), np.zeros((n, m)))

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in "ABCD"}

    @classmethod
    def from_dict(cls, d: dict) -> "StateSpace":
        D = np.atleast_2d(np.asarray(d["D"], dtype=float))
        q, p = D.shape
        A = np.asarray(d.get("A", []), dtype=float)
        n = int(round(np.sqrt(A.size)))
        return cls(A.reshape(n, n), np.asarray(d.get("B", []), float).reshape(n, p),
                   np.asarray(d.get("C", []), float).reshape(q, n), D)


def spectral_radius(A: np.ndarray) -> float:
    A = np.asarray(A)
    if A.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def eval_transfer(sys: StateSpace, theta) -> np.ndarray:
    """Evaluate ``C (e^{j theta} I - A)^{-1} B + D``.

    ``theta`` may be a scalar (returns ``q x p``) or an array of angles
    (returns ``(len(theta), q, p)``).
    """
    theta_arr = np.asarray(theta, dtype=float)
    scalar = theta_arr.ndim == 0
    theta_arr = np.atleast_1d(theta_arr)
    z = np.exp(1j * theta_arr)
    n = sys.n_states
    out = np.broadcast_to(sys.D.astype(complex), (z.size,) + sys.D.shape).copy()
    if n:
        eig = np.linalg.eigvals(sys.A)
        gap = np.min(np.abs(z[:, None] - eig[None, :]))
        if gap < 1e-12:
            raise np.linalg.LinAlgError(
                "eigenvalue of A on the unit circle: resolvent is singular")
        M = z[:, None, None] * np.eye(n) - sys.A
        X = np.linalg.solve(M, np.broadcast_to(sys.B, (z.size, n, sys.n_inputs)))
        out += sys.C @ X
    return out[0] if scalar else out


def _kron_operator(F: np.ndarray) -> np.ndarray:
    n = F.shape[0]
    return np.eye(n * n) - np.kron(F, F)


class LyapunovSolver:
    """Repeated solves of ``X - F X F^T = Q`` (or the transposed equation).

    The Kronecker operator is factored once, so many right-hand sides with a
    common ``F`` cost one LU decomposition.
    """

    def __init__(self, F: np.ndarray):
        F = np.atleast_2d(np.asarray(F, dtype=float))
        if F.size == 0:
            F = np.zeros((0, 0))
        self.F = F
        self.n = F.shape[0]
        if spectral_radius(F) >= 1.0:
            raise UnstableSystemError(
                f"Lyapunov solve needs a stable F (spectral radius {spectral_radius(F):.6g})")
        self._lu = None
        if 0 < self.n <= KRON_MAX_DIM:
            self._lu = la.lu_factor(_kron_operator(F))

    def solve(self, Q: np.ndarray, transpose: bool = False) -> np.ndarray:
        """Solve ``X - F X F^T = Q``; ``transpose=True`` solves ``X - F^T X F = Q``.

        ``Q`` may carry leading batch dimensions.
        """
        Q = np.asarray(Q, dtype=float)
        n = self.n
        if n == 0:
            return np.zeros(Q.shape)
        batch = Q.shape[:-2]
        if self._lu is not None:
            rhs = Q.reshape(-1, n * n).T
            # row-major vec: vec(F X F^T) = (F kron F) vec(X)
            X = la.lu_solve(self._lu, rhs, trans=1 if transpose else 0)
            X = X.T.reshape(batch + (n, n))
        else:
            Ft = self.F.T if transpose else self.F
            flat = Q.reshape((-1, n, n))
            X = np.stack([la.solve_discrete_lyapunov(Ft, q, method="bilinear") for q in flat])
            X = X.reshape(batch + (n, n))
        if np.allclose(Q, np.swapaxes(Q, -1, -2), rtol=0, atol=0):
            X = 0.5 * (X + np.swapaxes(X, -1, -2))
        return X


def solve_discrete_lyapunov(F: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Solve ``X - F X F^T = Q`` for stable ``F``.

    Raises
    ------
    UnstableSystemError
        If the spectral radius of ``F`` is not below one.
    """
    return LyapunovSolver(F).solve(Q)


def reachability_gramian(A, B, check: bool = False, rtol: float = 1e-10) -> np.ndarray:
    """Solution of ``X - A X A^T = B B^T``.

    With ``check=True`` an :class:`UnreachableError` is raised when the Gramian
    is not positive definite (relative tolerance ``rtol``).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    X = solve_discrete_lyapunov(A, B @ B.T)
    if check and not _is_pd(X, rtol):
        raise UnreachableError("reachability Gramian is singular: (A, B) is not reachable")
    return X


def _is_pd(X: np.ndarray, rtol: float) -> bool:
    w = np.linalg.eigvalsh(X)
    return w.size == 0 or w[0] > rtol * max(1.0, w[-1])


def is_reachable(A, B, rtol: float = 1e-10) -> bool:
    return _is_pd(reachability_gramian(A, B), rtol)


def output_covariance(sys: StateSpace) -> np.ndarray:
    """Steady-state output covariance under unit white-noise input.

    Equals ``(1/2pi) int H H^* dtheta`` for the stable transfer function ``H``.
    """
    R = reachability_gramian(sys.A, sys.B)
    return sys.C @ R @ sys.C.T + sys.D @ sys.D.T


def series(first: StateSpace, second: StateSpace) -> StateSpace:
    """Cascade: ``second`` applied to the output of ``first``.

    The transfer function is ``second(z) @ first(z)``; the state is
    ``[x_first; x_second]``.
    """
    if first.n_outputs != second.n_inputs:
        raise ValueError(
            f"dimension mismatch: first has {first.n_outputs} outputs, "
            f"second has {second.n_inputs} inputs")
    n1, n2 = first.n_states, second.n_states
    A = np.block([[first.A, np.zeros((n1, n2))],
                  [second.B @ first.C, second.A]])
    B = np.vstack([first.B, second.B @ first.D])
    C = np.hstack([second.D @ first.C, second.C])
    D = second.D @ first.D
    return StateSpace(A, B, C, D)


def build_filterbank(poles: Sequence[complex], m: int = 1, B=None,
                     pair_tol: float = 1e-12) -> StateSpace:
    """Block-diagonal filter bank ``G(z) = (zI - A)^{-1} B``.

    Real poles give 1x1 blocks, each conjugate pair ``r e^{+-jw}`` gives the
    real block ``[[r cos w, r sin w], [-r sin w, r cos w]]``. Blocks follow
    the order in which poles (or the first member of a pair) appear.

    The input matrix defaults to a column of ones when ``m == 1``. For
    ``m > 1`` row ``i`` is the unit vector ``e_{i mod m}``; a matrix of ones
    would have rank one and hide all but one input direction.
    """
    poles = [complex(p) for p in poles]
    for p in poles:
        if abs(p) >= 1.0:
            raise ValueError(f"pole {p} is not strictly inside the unit disk")
    blocks = []
    used = [False] * len(poles)
    for i, p in enumerate(poles):
        if used[i]:
            continue
        used[i] = True
        if abs(p.imag) <= pair_tol:
            blocks.append(np.array([[p.real]]))
            continue
        match = next((j for j in range(i + 1, len(poles))
                      if not used[j] and abs(poles[j] - p.conjugate()) <= 1e-9 * max(1.0, abs(p))),
                     None)
        if match is None:
            raise ValueError(f"complex pole {p} has no conjugate partner")
        used[match] = True
        r, w = abs(p), abs(np.angle(p))
        c, s = r * np.cos(w), r * np.sin(w)
        blocks.append(np.array([[c, s], [-s, c]]))
    A = la.block_diag(*blocks) if blocks else np.zeros((0, 0))
    n = A.shape[0]
    if B is None:
        if m == 1:
            B = np.ones((n, 1))
        else:
            B = np.zeros((n, m))
            B[np.arange(n), np.arange(n) % m] = 1.0
    return StateSpace.filterbank(A, B)


def conjugate_pairs(radius: float, angles: Sequence[float]) -> list[complex]:
    """Expand ``radius * e^{+-j angle}`` into an explicit pole list."""
    out: list[complex] = []
    for w in angles:
        p = radius * np.exp(1j * w)
        out += [p, p.conjugate()]
    return out
