"""Seeded random streams and the small dense linear algebra the samplers need.

All randomness in the package flows through :class:`RngStream`. A stream is
identified by ``(seed, stream_id, substream)`` and backed by NumPy's PCG64
bit generator seeded through ``SeedSequence(seed, spawn_key=(stream_id,
substream))``. Distinct spawn keys give statistically independent streams,
and the same key always reproduces the same draw sequence.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import lapack, solve_triangular

from .config import TOLERANCES

GENERATOR_NAME = "numpy.random.PCG64/SeedSequence(seed, spawn_key=(stream_id, substream))"


def generator_identity() -> dict:
    """Provenance record naming the bit generator and the NumPy version."""
    return {"generator": GENERATOR_NAME, "numpy_version": np.__version__}


class CholeskyError(np.linalg.LinAlgError):
    """Raised when a matrix is not positive definite.

    ``pivot`` is the zero-based index of the first leading minor that is not
    positive.
    """

    def __init__(self, pivot: int, message: str | None = None):
        self.pivot = pivot
        super().__init__(message or f"matrix is not positive definite (leading minor {pivot + 1} <= 0, pivot index {pivot})")


@dataclass
class RngStream:
    """One independent, reproducible stream of random draws."""

    seed: int
    stream_id: int = 0
    substream: int = 0
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.seed < 0 or self.stream_id < 0 or self.substream < 0:
            raise ValueError("seed, stream_id and substream must be non-negative")
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id, self.substream))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def child(self, substream: int) -> "RngStream":
        """Fresh stream sharing seed and stream_id but with another substream."""
        return RngStream(self.seed, self.stream_id, substream)

    def standard_normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def chisquare(self, df, size=None):
        return self._gen.chisquare(df, size)


@dataclass(frozen=True)
class MvnParams:
    """Mean vector and covariance matrix of a multivariate normal."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sigma = np.asarray(self.sigma, dtype=float).reshape(mu.size, mu.size)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def dim(self) -> int:
        return self.mu.size


def _check_symmetric(a: np.ndarray) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    scale = max(np.abs(a).max(), 1.0) if a.size else 1.0
    if np.abs(a - a.T).max(initial=0.0) > TOLERANCES.symmetry_rel * scale:
        raise ValueError("matrix is not symmetric")


def cholesky(sigma) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == sigma``.

    Raises
    ------
    CholeskyError
        If ``sigma`` is not positive definite; carries the failing pivot.
    """
    a = np.asarray(sigma, dtype=float)
    _check_symmetric(a)
    if a.size == 0:
        return a.copy()
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite entries")
    c, info = lapack.dpotrf(a, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        raise CholeskyError(info - 1)
    if info < 0:
        raise ValueError(f"dpotrf: illegal argument {-info}")
    return c


def draw_mvn(p: MvnParams, rng: RngStream, size: int | None = None) -> np.ndarray:
    """Draw ``mu + L z`` with ``z`` standard normal.

    With ``size`` given, returns a ``(size, d)`` array of independent draws.
    """
    L = cholesky(p.sigma)
    if size is None:
        z = rng.standard_normal(p.dim)
        return p.mu + L @ z
    z = rng.standard_normal((size, p.dim))
    return p.mu + z @ L.T


def draw_inverse_wishart(df: float, scale, rng: RngStream) -> np.ndarray:
    """Draw from the inverse Wishart with ``df`` degrees of freedom and scale matrix.

    Parameterized so that ``E[draw] = scale / (df - d - 1)``. The draw is the
    inverse of a Bartlett-decomposed Wishart(df, scale^-1): with ``scale = L L'``
    and Bartlett factor ``A``, the result is ``M' M`` where ``M = A^-1 L'``.
    """
    psi = np.atleast_2d(np.asarray(scale, dtype=float))
    d = psi.shape[0]
    if df <= d - 1:
        raise ValueError(f"inverse Wishart needs df > d - 1 (df={df}, d={d})")
    return _inverse_wishart_from_factor(df, cholesky(psi), rng)


def _inverse_wishart_from_factor(df: float, L: np.ndarray, rng: RngStream) -> np.ndarray:
    d = L.shape[0]
    A = np.zeros((d, d))
    A[np.diag_indices(d)] = np.sqrt(rng.chisquare(df - np.arange(d)))
    il = np.tril_indices(d, -1)
    A[il] = rng.standard_normal(len(il[0]))
    M = solve_triangular(A, L.T, lower=True, check_finite=False)
    out = M.T @ M
    return 0.5 * (out + out.T)


def conditional_mvn(p: MvnParams, observed: Sequence[int], values) -> MvnParams:
    """Distribution of the unobserved coordinates given the observed ones.

    Parameters
    ----------
    p : MvnParams
        Joint distribution.
    observed : sequence of int
        Indices of the observed coordinates (distinct).
    values : array_like
        Observed values, aligned with ``observed``.

    Returns
    -------
    MvnParams
        Conditional mean ``mu_m + S_mo S_oo^-1 (y_o - mu_o)`` and covariance
        ``S_mm - S_mo S_oo^-1 S_om`` over the remaining coordinates in
        ascending index order.
    """
    obs = np.asarray(observed, dtype=int).ravel()
    vals = np.asarray(values, dtype=float).ravel()
    if obs.size != vals.size:
        raise ValueError("observed indices and values differ in length")
    if np.unique(obs).size != obs.size:
        raise ValueError("observed indices must be distinct")
    if obs.size and (obs.min() < 0 or obs.max() >= p.dim):
        raise IndexError("observed index out of range")
    if obs.size == 0:
        return p
    mis = np.setdiff1d(np.arange(p.dim), obs)
    if mis.size == 0:
        return MvnParams(np.empty(0), np.empty((0, 0)))
    s_oo = p.sigma[np.ix_(obs, obs)]
    s_mo = p.sigma[np.ix_(mis, obs)]
    try:
        L = cholesky(s_oo)
    except CholeskyError as exc:
        raise np.linalg.LinAlgError("observed-block covariance is singular") from exc
    # W = L^-1 S_om, so S_mo S_oo^-1 S_om = W' W
    W = solve_triangular(L, s_mo.T, lower=True)
    r = solve_triangular(L, vals - p.mu[obs], lower=True)
    mean = p.mu[mis] + W.T @ r
    cov = p.sigma[np.ix_(mis, mis)] - W.T @ W
    return MvnParams(mean, 0.5 * (cov + cov.T))
