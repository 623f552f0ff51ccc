"""Synthetic 1880-2007 accounting panel with a known generating process.

Log collections and log disbursements follow a stationary bivariate VAR(2);
headright is a fully observed log-linear trend with AR(1) noise; balances are
built from the flows so the panel foots exactly. Amounts are whole dollars,
which keeps the footing identity exact in floating point. Missing years are
drawn without replacement, weighted toward the early years, and never fall in
the reliable 1996-2007 era.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import AccountingSeries, YearRecord
from .stochastic import RngStream

FIRST_YEAR = 1880
LAST_YEAR = 2007
RELIABLE_FROM = 1996
ANALYSIS = (1887, 2007)

TRUE_MEAN = np.array([17.0, 16.9])
TRUE_COEFFS = np.array([
    [[0.60, 0.15], [0.10, 0.60]],
    [[0.10, 0.00], [0.00, 0.10]],
])
TRUE_COV = np.array([[0.04, 0.03], [0.03, 0.04]])


@dataclass(frozen=True)
class Fixture:
    series: AccountingSeries
    complete: AccountingSeries
    truth: dict


def _pick_missing(gen: np.random.Generator, years: np.ndarray, count: int, exclude=()) -> set[int]:
    cand = years[(years < RELIABLE_FROM) & ~np.isin(years, list(exclude))]
    count = min(count, cand.size)
    w = np.exp(-(cand - FIRST_YEAR) / 60.0)
    return set(gen.choice(cand, size=count, replace=False, p=w / w.sum()).tolist())


def make_fixture(seed: int, missing_frac: float = 1 / 3, first_year: int = FIRST_YEAR,
                 last_year: int = LAST_YEAR, footing_noise: float = 0.0) -> Fixture:
    """Build the panel.

    ``missing_frac`` is the share of the 1887-2007 years (121) whose
    collections are blanked; disbursements share most of those years,
    balances are blanked at half the rate. ``footing_noise`` perturbs
    reported balances by that fraction of mean collections (0 keeps exact
    footing).
    """
    if not 0 <= missing_frac < 1:
        raise ValueError("missing_frac must be in [0, 1)")
    gen = RngStream(seed, 0, 0).generator
    years = np.arange(first_year, last_year + 1)
    n = years.size
    k, p = 2, TRUE_COEFFS.shape[0]
    intercept = (np.eye(k) - TRUE_COEFFS.sum(axis=0)) @ TRUE_MEAN
    L = np.linalg.cholesky(TRUE_COV)
    burn = 200
    x = np.tile(TRUE_MEAN, (n + burn, 1))
    for t in range(p, n + burn):
        x[t] = intercept + sum(TRUE_COEFFS[i] @ x[t - i - 1] for i in range(p)) + L @ gen.standard_normal(k)
    x = x[burn:]
    coll = np.round(np.exp(x[:, 0]))
    disb = np.round(np.exp(x[:, 1]))

    hr_noise = np.zeros(n)
    for t in range(1, n):
        hr_noise[t] = 0.7 * hr_noise[t - 1] + 0.15 * gen.standard_normal()
    headright = np.round(np.exp(12.0 + 0.03 * (years - first_year) + hr_noise))

    net = np.cumsum(coll - disb)
    opening = max(5.0 * coll.mean(), -net.min() + coll.mean())
    balance = np.round(opening) + net
    if footing_noise > 0:
        balance = np.round(balance + footing_noise * coll.mean() * gen.standard_normal(n))
        balance = np.maximum(balance, 1.0)

    n_analysis = ANALYSIS[1] - ANALYSIS[0] + 1
    m_coll = _pick_missing(gen, years, int(round(missing_frac * n_analysis)))
    shared = sorted(m_coll)
    keep = gen.choice(len(shared), size=int(round(0.8 * len(shared))), replace=False) if shared else []
    m_disb = {shared[i] for i in keep}
    m_disb |= _pick_missing(gen, years, len(m_coll) - len(m_disb), exclude=m_coll)
    m_bal = _pick_missing(gen, years, int(round(0.5 * missing_frac * n_analysis)))

    complete, observed = [], []
    for i, y in enumerate(years.tolist()):
        full = YearRecord(y, float(coll[i]), float(disb[i]), float(balance[i]), float(headright[i]))
        complete.append(full)
        observed.append(YearRecord(
            y,
            None if y in m_coll else full.collections,
            None if y in m_disb else full.disbursements,
            None if y in m_bal else full.balance,
            full.headright,
        ))
    sel = (years >= ANALYSIS[0]) & (years <= ANALYSIS[1])
    truth = {
        "seed": seed,
        "first_year": first_year,
        "last_year": last_year,
        "log_scale_var": {
            "p": p,
            "intercept": intercept.tolist(),
            "coeffs": TRUE_COEFFS.tolist(),
            "innovation_cov": TRUE_COV.tolist(),
            "process_mean": TRUE_MEAN.tolist(),
        },
        "headright": {"log_level": 12.0, "log_slope_per_year": 0.03, "ar1": 0.7, "noise_sd": 0.15},
        "opening_balance": float(np.round(opening)),
        "footing_noise": footing_noise,
        "missing_frac": missing_frac,
        "missing_years": {
            "collections": sorted(m_coll),
            "disbursements": sorted(m_disb),
            "balance": sorted(m_bal),
        },
        "true_calculated_balance": float(coll[sel].sum() - disb[sel].sum()),
        "analysis_range": list(ANALYSIS),
    }
    return Fixture(AccountingSeries(tuple(observed)), AccountingSeries(tuple(complete)), truth)
