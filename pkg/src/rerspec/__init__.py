"""Multivariate spectral estimation by relative-entropy-rate minimization."""

from __future__ import annotations

__version__ = "0.1.0"

from .factor import NotFactorizable, RiccatiCertificate, compute_Y, compute_Yk, logdet_integral, solve_dare
from .gamma import (GammaBasis, InfeasibleCovariance, gamma_apply, normalize_problem,
                    project_covariance, project_range, range_gamma_basis)
from .lti import StateSpace, build_filterbank, eval_transfer, series, solve_discrete_lyapunov
from .rer import ConvergenceError, RerSolution, SolverOptions, optimal_spectrum, solve_rer
from .spectra import (FactorDensity, GridDensity, d_rer, eval_density, rer_time_domain,
                      spectral_rer_partition)

__all__ = [
    "ConvergenceError", "FactorDensity", "GammaBasis", "GridDensity", "InfeasibleCovariance",
    "NotFactorizable", "RerSolution", "RiccatiCertificate", "SolverOptions", "StateSpace",
    "build_filterbank", "compute_Y", "compute_Yk", "d_rer", "eval_density", "eval_transfer",
    "gamma_apply", "logdet_integral", "normalize_problem", "optimal_spectrum",
    "project_covariance", "project_range", "range_gamma_basis", "rer_time_domain", "series",
    "solve_dare", "solve_discrete_lyapunov", "solve_rer", "spectral_rer_partition",
]
