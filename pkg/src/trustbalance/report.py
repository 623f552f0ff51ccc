"""Distribution summaries of calculated balances and their file formats."""
from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import __version__
from .pipeline import MODELED, PipelineConfig, ReplicateResult
from .stochastic import generator_identity

QUANTILE_METHOD = "linear interpolation between order statistics, position (n-1)q + 1"


def quantiles(x, probs) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise ValueError("no values")
    q = np.quantile(x, probs, method="linear")
    # interpolation can break monotonicity by one ulp
    return np.maximum.accumulate(np.atleast_1d(q))


def _exact_mean(v: np.ndarray, axis=0) -> np.ndarray:
    """Mean clipped into [min, max], so a constant column averages to itself exactly."""
    return np.clip(v.mean(axis=axis), v.min(axis=axis), v.max(axis=axis))


def provenance(seed: int) -> dict:
    return {"seed": seed, "package": "trustbalance", "version": __version__, **generator_identity()}


@dataclass(frozen=True)
class BandRow:
    year: int
    variable: str
    stage: str  # "imputed" or "synthetic"
    mean: float
    lo95: float
    hi95: float


def yearly_bands(results: Sequence[ReplicateResult], cfg: PipelineConfig) -> list[BandRow]:
    """Across-replicate mean and 2.5%/97.5% quantiles per year and variable.

    Computed twice: from the completed (imputation-only) values and from the
    final values after synthetic substitution.
    """
    if len(results) < 1:
        raise ValueError("no replicates")
    years = results[0].years
    a0, a1 = cfg.analysis_range
    sel = np.flatnonzero((years >= a0) & (years <= a1))
    rows = []
    for stage, attr in (("imputed", "completed"), ("synthetic", "final")):
        stack = np.stack([getattr(r, attr)[sel] for r in results])  # (R, years, 2)
        mean = _exact_mean(stack)
        lo = np.quantile(stack, 0.025, axis=0, method="linear")
        hi = np.quantile(stack, 0.975, axis=0, method="linear")
        for j, var in enumerate(MODELED):
            for i, yi in enumerate(sel):
                rows.append(BandRow(int(years[yi]), var, stage, float(mean[i, j]), float(lo[i, j]), float(hi[i, j])))
    rows.sort(key=lambda b: (b.year, MODELED.index(b.variable), b.stage))
    return rows


def _qkey(q: float) -> str:
    return f"{q:g}"


@dataclass
class BalanceReport:
    n_replicates: int
    mean: float
    median: float
    std: float
    quantiles: dict[str, float]
    ci95: tuple[float, float]
    stated_balance: float
    understatement: dict[str, float]
    mean_understatement: float
    bands: list[BandRow]
    n_failed: int
    n_redraws: int
    var_orders: dict[str, int]
    n_nonstationary: int
    config: dict
    provenance: dict

    def to_dict(self, include_bands: bool = True) -> dict:
        d = {
            "n_replicates": self.n_replicates,
            "n_failed": self.n_failed,
            "n_redraws": self.n_redraws,
            "calculated_balance": {
                "mean": self.mean,
                "median": self.median,
                "std": self.std,
                "quantiles": self.quantiles,
                "ci95": list(self.ci95),
            },
            "stated_balance": self.stated_balance,
            "understatement": {"mean": self.mean_understatement, "quantiles": self.understatement},
            "quantile_method": QUANTILE_METHOD,
            "var_orders": self.var_orders,
            "n_nonstationary": self.n_nonstationary,
            "config": self.config,
            "provenance": self.provenance,
        }
        if include_bands:
            d["bands"] = [b.__dict__ for b in self.bands]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n"


def summarize(results: Sequence[ReplicateResult], cfg: PipelineConfig, n_failed: int = 0) -> BalanceReport:
    if len(results) < 2:
        raise ValueError("summarize needs at least 2 replicates")
    bal = np.array([r.calculated_balance for r in results])
    probs = sorted(set(cfg.percentiles) | {0.025, 0.25, 0.5, 0.75, 0.975})
    qs = quantiles(bal, probs)
    qmap = {_qkey(p): float(v) for p, v in zip(probs, qs)}
    mean = float(np.clip(bal.mean(), bal.min(), bal.max()))
    orders = Counter(str(r.var_order) for r in results if r.var_order is not None)
    radii = [r.spectral_radius for r in results if r.spectral_radius is not None]
    return BalanceReport(
        n_replicates=len(results),
        mean=mean,
        median=qmap["0.5"],
        std=float(bal.std(ddof=1)),
        quantiles=qmap,
        ci95=(qmap["0.025"], qmap["0.975"]),
        stated_balance=float(cfg.stated_balance),
        understatement={k: v - cfg.stated_balance for k, v in qmap.items()},
        mean_understatement=mean - cfg.stated_balance,
        bands=yearly_bands(results, cfg),
        n_failed=n_failed,
        n_redraws=int(sum(r.redraws for r in results)),
        var_orders=dict(sorted(orders.items())),
        n_nonstationary=int(sum(r >= 1.0 for r in radii)),
        config=cfg.to_dict(),
        provenance=provenance(cfg.seed),
    )


def _comment(seed: int) -> str:
    p = provenance(seed)
    return f"# seed={p['seed']} generator={p['generator']} numpy={p['numpy_version']} {p['package']}={p['version']}\n"


def balances_csv(results: Sequence[ReplicateResult], seed: int) -> str:
    buf = io.StringIO()
    buf.write(_comment(seed))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["replicate_id", "calculated_balance"])
    for r in results:
        w.writerow([r.replicate_id, repr(r.calculated_balance)])
    return buf.getvalue()


def bands_csv(bands: Sequence[BandRow], seed: int) -> str:
    buf = io.StringIO()
    buf.write(_comment(seed))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["year", "variable", "stage", "mean", "lo95", "hi95"])
    for b in bands:
        w.writerow([b.year, b.variable, b.stage, repr(b.mean), repr(b.lo95), repr(b.hi95)])
    return buf.getvalue()
