"""Numerical tolerances shared across the package.

Everything that compares floats against a threshold reads it from here so
that the defaults are stated in exactly one place.
"""
from dataclasses import dataclass


@dataclass(frozen=True)
class Tolerances:
    # Cholesky reconstruction error, relative Frobenius norm
    cholesky_rel: float = 1e-10
    # relative asymmetry allowed before a matrix is rejected as non-symmetric
    symmetry_rel: float = 1e-8
    # EM convergence: relative change in observed-data log-likelihood
    em_rel_loglik: float = 1e-8
    em_max_iter: int = 500
    # ridge = ridge_rel * trace(S) / d, applied only after a failed PD check
    ridge_rel: float = 1e-8
    # companion spectral radius at or above this is reported as nonstationary
    stationarity_radius: float = 1.0
    # raw-scale imputation: redraws before a replicate is declared failed
    max_redraws: int = 100


TOLERANCES = Tolerances()
