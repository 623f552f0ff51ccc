"""Vector autoregression: least-squares fitting, AICC order selection, simulation.

Series are laid out ``k x n`` (one row per variable, one column per period).
The model is ``X_t = M [+ b t] + sum_i Phi_i X_{t-i} + Z_t`` with
``Z_t ~ N(0, Sigma_Z)``; the time index ``t`` counts periods from 1 at the
first column of the fitted series.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .stochastic import RngStream, cholesky


class VarFitError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class VarModel:
    k: int
    p: int
    intercept: np.ndarray
    coeffs: np.ndarray  # (p, k, k), coeffs[i] multiplies X_{t-i-1}
    innovation_cov: np.ndarray  # degrees-of-freedom corrected
    sigma_ml: np.ndarray  # residual covariance with denominator n_effective
    n_effective: int
    trend: np.ndarray | None = None
    residuals: np.ndarray | None = None  # (n_effective, k)

    @property
    def n_regressors(self) -> int:
        return self.k * self.p + 1 + (self.trend is not None)

    def companion(self) -> np.ndarray:
        k, p = self.k, self.p
        A = np.zeros((k * p, k * p))
        A[:k, :] = np.hstack(list(self.coeffs))
        A[k:, :-k] = np.eye(k * (p - 1))
        return A

    def process_mean(self) -> np.ndarray:
        """Stationary mean ``(I - sum Phi_i)^-1 M`` (intercept-only models)."""
        return np.linalg.solve(np.eye(self.k) - self.coeffs.sum(axis=0), self.intercept)

    def to_dict(self) -> dict:
        try:
            score = aicc(self)
        except ValueError:
            score = None
        return {
            "aicc": score,
            "k": self.k,
            "p": self.p,
            "intercept": self.intercept.tolist(),
            "coeffs": [c.tolist() for c in self.coeffs],
            "innovation_cov": self.innovation_cov.tolist(),
            "trend": None if self.trend is None else self.trend.tolist(),
            "n_effective": self.n_effective,
            "spectral_radius": stationarity_check(self),
        }


def min_length(k: int, p: int, with_trend: bool = False) -> int:
    return k * p + p + 3 + int(with_trend)


def _design(x: np.ndarray, p: int, start: int, with_trend: bool):
    n = x.shape[1]
    cols = [np.ones(n - start)]
    if with_trend:
        cols.append(np.arange(start + 1, n + 1, dtype=float))
    for i in range(1, p + 1):
        cols.append(x[:, start - i:n - i].T)
    return np.column_stack(cols), x[:, start:].T


def fit_var(series, p: int, with_trend: bool = False, start: int | None = None) -> VarModel:
    """Multivariate least squares fit of a VAR(p).

    Parameters
    ----------
    series : array_like, shape (k, n)
    p : int
        Autoregressive order, >= 1.
    with_trend : bool
        Add a linear time trend regressor.
    start : int, optional
        Number of leading periods used only as lags (default ``p``). Order
        comparisons pass a common ``start`` so all candidates share one
        estimation sample.
    """
    x = np.atleast_2d(np.asarray(series, dtype=float))
    k, n = x.shape
    if p < 1:
        raise ValueError("order p must be >= 1")
    start = p if start is None else start
    if start < p:
        raise ValueError("start must be >= p")
    if not np.all(np.isfinite(x)):
        raise ValueError("series must be finite")
    if n < min_length(k, p, with_trend) or n - start < k * p + 1 + int(with_trend) + 2:
        raise VarFitError(f"series of length {n} too short for VAR({p}) with k={k}")
    Z, Y = _design(x, p, start, with_trend)
    B, _, rank, _ = np.linalg.lstsq(Z, Y, rcond=None)
    if rank < Z.shape[1]:
        raise VarFitError(f"regressor matrix is rank deficient ({rank} < {Z.shape[1]})")
    resid = Y - Z @ B
    n_eff = Y.shape[0]
    ssr = resid.T @ resid
    ssr = 0.5 * (ssr + ssr.T)
    n_reg = Z.shape[1]
    j = 1
    trend = None
    if with_trend:
        trend = B[1].copy()
        j = 2
    coeffs = np.stack([B[j + i * k: j + (i + 1) * k].T for i in range(p)])
    return VarModel(k=k, p=p, intercept=B[0].copy(), coeffs=coeffs,
                    innovation_cov=ssr / (n_eff - n_reg), sigma_ml=ssr / n_eff,
                    n_effective=n_eff, trend=trend, residuals=resid)


def n_params(model: VarModel, include_cov_params: bool = False) -> int:
    k = model.k
    m = k * k * model.p + k + (k if model.trend is not None else 0)
    if include_cov_params:
        m += k * (k + 1) // 2
    return m


def aicc(model: VarModel, n_effective: int | None = None, include_cov_params: bool = False) -> float:
    """Small-sample corrected AIC, ``n ln det(Sigma_ml) + 2 m n / (n - m - 1)``.

    ``m`` counts the regression parameters; ``include_cov_params`` also counts
    the ``k(k+1)/2`` free covariance entries.
    """
    n = model.n_effective if n_effective is None else n_effective
    m = n_params(model, include_cov_params)
    if n - m - 1 <= 0:
        raise ValueError(f"AICC undefined: n_effective={n} <= m + 1 = {m + 1}")
    sign, logdet = np.linalg.slogdet(model.sigma_ml)
    if sign <= 0:
        return float("-inf")
    return float(n * logdet + 2.0 * m * n / (n - m - 1))


@dataclass(frozen=True)
class OrderSelection:
    orders: tuple[int, ...]
    scores: tuple[float | None, ...]  # None where the fit failed
    chosen: int

    def to_dict(self) -> dict:
        return {"orders": list(self.orders), "aicc": list(self.scores), "chosen": self.chosen}


def select_order(series, p_lo: int, p_hi: int, with_trend: bool = False,
                 include_cov_params: bool = False) -> OrderSelection:
    """Scan VAR orders ``p_lo..p_hi`` and choose the minimum-AICC one (ties to smaller p).

    All candidates are fitted on the same estimation sample, the periods
    after the first ``p_hi``.
    """
    x = np.atleast_2d(np.asarray(series, dtype=float))
    k, n = x.shape
    if not 1 <= p_lo <= p_hi:
        raise ValueError(f"invalid order range {p_lo}..{p_hi}")
    n_eff = n - p_hi
    m_max = k * k * p_hi + k + (k if with_trend else 0) + (k * (k + 1) // 2 if include_cov_params else 0)
    if n < min_length(k, p_hi, with_trend) or n_eff - m_max - 1 <= 0:
        raise ValueError(f"series of length {n} cannot support orders up to {p_hi}")
    orders = tuple(range(p_lo, p_hi + 1))
    scores = []
    for p in orders:
        try:
            scores.append(aicc(fit_var(x, p, with_trend, start=p_hi), include_cov_params=include_cov_params))
        except (VarFitError, ValueError):
            scores.append(None)
    valid = [(s, p) for s, p in zip(scores, orders) if s is not None]
    if not valid:
        raise VarFitError(f"every fit in {p_lo}..{p_hi} failed")
    best = min(s for s, _ in valid)
    chosen = min(p for s, p in valid if s == best)
    return OrderSelection(orders, tuple(scores), chosen)


def stationarity_check(model: VarModel) -> float:
    """Spectral radius of the companion matrix; below 1 means a stationary fit."""
    return float(np.max(np.abs(np.linalg.eigvals(model.companion()))))


def simulate_var(model: VarModel, presample, horizon: int, rng: RngStream, t0: int | None = None) -> np.ndarray:
    """Forward-simulate ``horizon`` periods after a ``k x p`` presample.

    Fresh innovations are drawn at every step. ``t0`` is the time index of the
    first simulated period, needed only for trend models.
    """
    k, p = model.k, model.p
    pre = np.atleast_2d(np.asarray(presample, dtype=float))
    if pre.shape != (k, p):
        raise ValueError(f"presample must be {k}x{p}, got {pre.shape}")
    if model.trend is not None and t0 is None:
        raise ValueError("t0 is required to simulate a trend model")
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    if np.any(model.innovation_cov != 0):
        L = cholesky(model.innovation_cov)
        noise = rng.standard_normal((horizon, k)) @ L.T
    else:
        noise = np.zeros((horizon, k))
    path = np.empty((k, p + horizon))
    path[:, :p] = pre
    for h in range(horizon):
        t = p + h
        x = model.intercept.copy()
        if model.trend is not None:
            x += model.trend * (t0 + h)
        for i in range(p):
            x += model.coeffs[i] @ path[:, t - i - 1]
        path[:, t] = x + noise[h]
    return path[:, p:]
