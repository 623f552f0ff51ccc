"""Multiple imputation under a multivariate normal model by data augmentation.

The chain alternates an imputation step, which fills each row's missing cells
from the conditional normal given that row's observed cells, with a posterior
step that draws fresh parameters from the complete-data posterior under the
noninformative prior::

    Sigma | Y  ~ InvWishart(n - 1, (n - 1) S)
    mu | Sigma, Y ~ N(ybar, Sigma / n)

Chains start from the EM estimate of the observed-data MLE.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy.linalg import lapack, solve_triangular

from .config import TOLERANCES
from .stochastic import (
    CholeskyError,
    MvnParams,
    RngStream,
    _inverse_wishart_from_factor,
    cholesky,
)

logger = logging.getLogger(__name__)

CHAIN_MODES = ("independent", "single")
SCALE_MODES = ("log", "raw")


class ImputationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ImputationConfig:
    n_imputations: int = 10_000
    burn_in: int = 500
    iterations_between: int = 100
    chain_mode: str = "independent"
    scale_mode: str = "log"
    # relative ridge, see Tolerances.ridge_rel
    ridge: float = TOLERANCES.ridge_rel

    def __post_init__(self):
        if self.n_imputations < 1:
            raise ValueError("n_imputations must be >= 1")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if self.iterations_between < 1:
            raise ValueError("iterations_between must be >= 1")
        if self.chain_mode not in CHAIN_MODES:
            raise ValueError(f"chain_mode must be one of {CHAIN_MODES}")
        if self.scale_mode not in SCALE_MODES:
            raise ValueError(f"scale_mode must be one of {SCALE_MODES}")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")


@dataclass(frozen=True)
class CompletedMatrix:
    """Data matrix with every cell filled; ``mask`` is True on observed cells."""

    values: np.ndarray
    mask: np.ndarray

    @property
    def imputed(self) -> np.ndarray:
        return ~self.mask


@dataclass(frozen=True)
class _Pattern:
    rows: np.ndarray
    obs: np.ndarray
    mis: np.ndarray
    oo: tuple
    om: tuple
    mm: tuple
    ro: tuple
    rm: tuple
    yo: np.ndarray | None = None  # observed block, cached when values are known

    def __iter__(self):
        return iter((self.rows, self.obs, self.mis))


def _patterns(mask: np.ndarray, values: np.ndarray | None = None) -> list[_Pattern]:
    """Group rows by missingness pattern, with the index tuples each group needs."""
    pats, inverse = np.unique(mask, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    out = []
    for k, pat in enumerate(pats):
        rows = np.flatnonzero(inverse == k)
        o, m = np.flatnonzero(pat), np.flatnonzero(~pat)
        ro = np.ix_(rows, o)
        yo = None if values is None else values[ro]
        out.append(_Pattern(rows, o, m, np.ix_(o, o), np.ix_(o, m), np.ix_(m, m), ro, np.ix_(rows, m), yo))
    return out


def _chol(a: np.ndarray) -> np.ndarray:
    """Unchecked lower Cholesky for the inner loop; raises CholeskyError on failure."""
    c, info = lapack.dpotrf(a, lower=1, clean=1)
    if info != 0:
        raise CholeskyError(max(info - 1, 0))
    return c


def _tri_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    x, info = lapack.dtrtrs(L, b, lower=1)
    if info != 0:
        raise np.linalg.LinAlgError("singular triangular factor")
    return x


def _check_data(values, mask):
    values = np.asarray(values, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if values.ndim != 2 or values.shape != mask.shape:
        raise ValueError("values and mask must be 2-D arrays of equal shape")
    if not np.all(np.isfinite(values[mask])):
        raise ValueError("observed cells must be finite")
    return values, mask


def _ridged(sigma: np.ndarray, ridge_rel: float, what: str) -> np.ndarray:
    """``sigma`` if PD, otherwise ``sigma`` plus a logged diagonal ridge."""
    return _ridged_factor(sigma, ridge_rel, what)[0]


def _ridged_factor(sigma: np.ndarray, ridge_rel: float, what: str):
    """``(sigma', L)``: ``sigma`` or its ridged version, with its Cholesky factor."""
    try:
        return sigma, _chol(sigma)
    except CholeskyError as exc:
        d = sigma.shape[0]
        amount = ridge_rel * np.trace(sigma) / d
        if ridge_rel <= 0 or not amount > 0:
            raise ImputationError(f"{what} is not positive definite (pivot {exc.pivot}); set a positive ridge") from exc
        out = sigma + amount * np.eye(d)
        try:
            L = _chol(out)
        except CholeskyError as exc2:
            raise ImputationError(
                f"{what} is not positive definite even after ridge {amount:.3g}; use a larger ridge") from exc2
        logger.warning("ridge %.3g added to %s diagonal", amount, what)
        return out, L


def em_mvn(values, mask, *, max_iter: int = TOLERANCES.em_max_iter,
           tol: float = TOLERANCES.em_rel_loglik, ridge: float = TOLERANCES.ridge_rel):
    """EM for the multivariate normal MLE with missing cells.

    Returns ``(params, n_iter, loglik)`` where ``params`` holds the maximum
    likelihood estimate (covariance with denominator n).
    """
    values, mask = _check_data(values, mask)
    n, d = values.shape
    n_obs = mask.sum(axis=0)
    if np.any(n_obs < 2):
        bad = np.flatnonzero(n_obs < 2).tolist()
        raise ImputationError(f"variables {bad} have fewer than 2 observed values")
    x = np.where(mask, values, np.nan)
    mu = np.nanmean(x, axis=0)
    sigma = np.diag(np.nanvar(x, axis=0))
    sigma = _ridged(sigma, ridge, "EM starting covariance")
    groups = _patterns(mask)
    ll_prev = None
    ll = -np.inf
    it = 0
    for it in range(1, max_iter + 1):
        T1 = np.zeros(d)
        T2 = np.zeros((d, d))
        ll = 0.0
        for rows, o, m in groups:
            yhat = values[rows].copy()
            if o.size:
                L = cholesky(sigma[np.ix_(o, o)])
                r = solve_triangular(L, (yhat[:, o] - mu[o]).T, lower=True)
                ll -= 0.5 * (np.sum(r * r) + rows.size * (o.size * np.log(2 * np.pi) + 2 * np.sum(np.log(np.diag(L)))))
            if m.size:
                if o.size:
                    W = solve_triangular(L, sigma[np.ix_(o, m)], lower=True)
                    yhat[:, m] = mu[m] + r.T @ W
                    C = sigma[np.ix_(m, m)] - W.T @ W
                else:
                    yhat[:, m] = mu[m]
                    C = sigma[np.ix_(m, m)]
                T2[np.ix_(m, m)] += rows.size * C
            T1 += yhat.sum(axis=0)
            T2 += yhat.T @ yhat
        mu = T1 / n
        sigma = T2 / n - np.outer(mu, mu)
        sigma = _ridged(0.5 * (sigma + sigma.T), ridge, "EM covariance")
        if ll_prev is not None and abs(ll - ll_prev) <= tol * abs(ll_prev):
            break
        ll_prev = ll
    else:
        logger.warning("EM stopped at %d iterations without meeting tolerance", max_iter)
    return MvnParams(mu, sigma), it, ll


def em_start(values, mask, ridge: float = TOLERANCES.ridge_rel) -> MvnParams:
    """Chain starting values: EM estimate with the covariance rescaled to denominator n - 1."""
    values, mask = _check_data(values, mask)
    n = values.shape[0]
    params, _, _ = em_mvn(values, mask, ridge=ridge)
    sigma = params.sigma * (n / (n - 1)) if n > 1 else params.sigma
    return MvnParams(params.mu, sigma)


def i_step(params: MvnParams, values, mask, rng: RngStream, groups=None) -> CompletedMatrix:
    """Fill every missing cell from its row's conditional normal.

    One standard normal is drawn per cell (row-major), and cell ``(i, j)``
    always consumes draw ``(i, j)``; observed cells are returned untouched.
    """
    values, mask = _check_data(values, mask)
    n, d = values.shape
    mu, sigma = params.mu, params.sigma
    z = rng.standard_normal((n, d))
    out = values.copy()
    for g in (groups if groups is not None else _patterns(mask)):
        if g.mis.size == 0:
            continue
        if g.obs.size:
            try:
                L = _chol(sigma[g.oo])
            except CholeskyError as exc:
                raise ImputationError("observed-block covariance is not positive definite") from exc
            W = _tri_solve(L, sigma[g.om])
            yo = values[g.ro] if g.yo is None else g.yo
            r = _tri_solve(L, (yo - mu[g.obs]).T)
            cmean = mu[g.mis] + r.T @ W
            ccov = sigma[g.mm] - W.T @ W
        else:
            cmean = mu[g.mis]
            ccov = sigma[g.mm]
        try:
            Lc = _chol(0.5 * (ccov + ccov.T))
        except CholeskyError as exc:
            raise ImputationError("conditional covariance is not positive definite") from exc
        out[g.rm] = cmean + z[g.rm] @ Lc.T
    out[mask] = values[mask]
    return CompletedMatrix(out, mask.copy())


def p_step(completed: CompletedMatrix, rng: RngStream, ridge: float = TOLERANCES.ridge_rel) -> MvnParams:
    """Draw (mu, Sigma) from the complete-data posterior."""
    y = completed.values
    n, d = y.shape
    if n < 2:
        raise ImputationError("posterior step needs at least 2 rows")
    ybar = y.mean(axis=0)
    yc = y - ybar
    scatter = yc.T @ yc  # (n - 1) S
    _, L = _ridged_factor(0.5 * (scatter + scatter.T), ridge, "scatter matrix (n-1)S")
    sigma = _inverse_wishart_from_factor(n - 1, L, rng)
    try:
        Ls = _chol(sigma)
    except CholeskyError as exc:
        raise ImputationError("posterior covariance draw is not positive definite") from exc
    # mu ~ N(ybar, sigma / n)
    mu = ybar + (Ls @ rng.standard_normal(d)) / np.sqrt(n)
    return MvnParams(mu, sigma)


def _trace_row(chain, iteration, params):
    _, logdet = np.linalg.slogdet(params.sigma)
    return (chain, iteration, *params.mu.tolist(), float(logdet))


def _run_chain(values, mask, start, rng, burn_in, between, count, ridge, chain_id, trace):
    groups = _patterns(mask, values)
    theta = start
    it = 0
    produced = 0
    try:
        while produced < count:
            y = i_step(theta, values, mask, rng, groups)
            it += 1
            if it > burn_in and (it - burn_in - 1) % between == 0:
                produced += 1
                yield y
                if produced == count:
                    return
            theta = p_step(y, rng, ridge)
            if trace is not None:
                trace.append(_trace_row(chain_id, it, theta))
    except (ImputationError, np.linalg.LinAlgError, ValueError) as exc:
        raise ImputationError(f"chain {chain_id}, iteration {it}: {exc}") from exc


def impute_one(values, mask, start: MvnParams, rng: RngStream, burn_in: int,
               ridge: float = TOLERANCES.ridge_rel, trace: list | None = None) -> CompletedMatrix:
    """A single imputation: ``burn_in`` full iterations, then one imputation step."""
    values, mask = _check_data(values, mask)
    if mask.all():
        return CompletedMatrix(values.copy(), mask.copy())
    return next(_run_chain(values, mask, start, rng, burn_in, 1, 1, ridge, rng.stream_id, trace))


def impute(values, mask, cfg: ImputationConfig, rng: RngStream, start: MvnParams | None = None,
           trace: list | None = None) -> Iterator[CompletedMatrix]:
    """Yield ``cfg.n_imputations`` completed matrices.

    In independent-chains mode imputation ``m`` runs its own chain on stream
    ``(rng.seed, m, rng.substream)``; in single-chain mode one chain on ``rng``
    is thinned every ``cfg.iterations_between`` iterations after burn-in.
    """
    values, mask = _check_data(values, mask)
    if mask.all():
        for _ in range(cfg.n_imputations):
            yield CompletedMatrix(values.copy(), mask.copy())
        return
    if start is None:
        start = em_start(values, mask, cfg.ridge)
    if cfg.chain_mode == "single":
        yield from _run_chain(values, mask, start, rng, cfg.burn_in, cfg.iterations_between,
                              cfg.n_imputations, cfg.ridge, rng.stream_id, trace)
        return
    for m in range(cfg.n_imputations):
        yield impute_one(values, mask, start, RngStream(rng.seed, m, rng.substream), cfg.burn_in, cfg.ridge, trace)


def write_trace_csv(trace: list, path, names=None, comment: str | None = None) -> None:
    """Dump chain traces recorded by ``impute(..., trace=[])`` as CSV, optionally under a ``#`` line."""
    if not trace:
        raise ValueError("empty trace")
    d = len(trace[0]) - 3
    names = list(names) if names is not None else [f"v{j}" for j in range(d)]
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "iteration", *[f"mu_{n}" for n in names], "logdet_sigma"])
        w.writerows(trace)
