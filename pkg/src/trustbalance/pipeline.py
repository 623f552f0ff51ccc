"""End-to-end replicate generation: impute, refit a VAR, splice a synthetic realization, total."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import TOLERANCES
from .imputation import (
    CompletedMatrix,
    ImputationConfig,
    ImputationError,
    _run_chain,
    em_start,
    impute_one,
)
from .ingest import COLUMNS, AccountingSeries, LogMatrix, from_log_scale, to_log_scale
from .stochastic import MvnParams, RngStream
from .var import VarFitError, fit_var, select_order, simulate_var, stationarity_check

logger = logging.getLogger(__name__)

DEFAULT_PERCENTILES = (0.01, 0.025, 0.05, 0.10, 0.25, 0.50, 0.75, 0.90, 0.95, 0.975, 0.99)
REPORTED_STATED_BALANCE = 423.7e6
MODELED = ("collections", "disbursements")
_COLL = COLUMNS.index("collections")
_DISB = COLUMNS.index("disbursements")
# stream_id reserved for the single-chain sampler; replicate ids stay below it
SINGLE_CHAIN_STREAM = 2**40


class ReplicateError(RuntimeError):
    def __init__(self, replicate_id: int, message: str):
        self.replicate_id = replicate_id
        super().__init__(f"replicate {replicate_id}: {message}")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int
    n_replicates: int = 10_000
    analysis_range: tuple[int, int] = (1887, 2007)
    # None means no synthetic regeneration
    synthetic_range: tuple[int, int] | None = (1887, 1995)
    var_order: int = 7
    order_scan: tuple[int, int] | None = None
    with_trend: bool = False
    aicc_cov_params: bool = False
    burn_in: int = 500
    chain_mode: str = "independent"
    iterations_between: int = 100
    scale_mode: str = "log"
    ridge: float = TOLERANCES.ridge_rel
    percentiles: tuple[float, ...] = DEFAULT_PERCENTILES
    stated_balance: float = REPORTED_STATED_BALANCE
    salvage_failed: bool = False

    def __post_init__(self):
        object.__setattr__(self, "analysis_range", tuple(self.analysis_range))
        if self.synthetic_range is not None:
            object.__setattr__(self, "synthetic_range", tuple(self.synthetic_range))
        if self.order_scan is not None:
            object.__setattr__(self, "order_scan", tuple(self.order_scan))
        object.__setattr__(self, "percentiles", tuple(float(q) for q in self.percentiles))
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.n_replicates < 1:
            raise ValueError("n_replicates must be >= 1")
        a0, a1 = self.analysis_range
        if a0 > a1:
            raise ValueError(f"empty analysis range {a0}-{a1}")
        if self.synthetic_range is not None:
            s0, s1 = self.synthetic_range
            if s0 > s1 or s0 < a0 or s1 > a1:
                raise ValueError(f"synthetic range {s0}-{s1} must lie within analysis range {a0}-{a1}")
        if self.var_order < 1:
            raise ValueError("var_order must be >= 1")
        if self.order_scan is not None and not 1 <= self.order_scan[0] <= self.order_scan[1]:
            raise ValueError(f"invalid order scan {self.order_scan}")
        if not all(0 < q < 1 for q in self.percentiles):
            raise ValueError("percentiles must lie strictly between 0 and 1")
        self.imputation_config()

    @property
    def presample_years(self) -> int:
        return self.order_scan[1] if self.order_scan is not None else self.var_order

    def imputation_config(self) -> ImputationConfig:
        return ImputationConfig(n_imputations=self.n_replicates, burn_in=self.burn_in,
                                iterations_between=self.iterations_between, chain_mode=self.chain_mode,
                                scale_mode=self.scale_mode, ridge=self.ridge)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("analysis_range", "synthetic_range", "order_scan", "percentiles"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d


@dataclass
class ReplicateResult:
    replicate_id: int
    years: np.ndarray
    # (n_years, 2) dollars, columns collections, disbursements
    completed: np.ndarray
    final: np.ndarray
    total_collections: float
    total_disbursements: float
    calculated_balance: float
    var_order: int | None = None
    spectral_radius: float | None = None
    redraws: int = 0
    model: dict | None = None


@dataclass
class Prepared:
    """Per-run state shared by every replicate."""

    matrix: LogMatrix
    start: MvnParams | None
    years: np.ndarray = field(init=False)

    def __post_init__(self):
        self.years = self.matrix.years


def validate_coverage(data: AccountingSeries, cfg: PipelineConfig) -> None:
    a0, a1 = cfg.analysis_range
    if a0 < data.first_year or a1 > data.last_year:
        raise ValueError(f"analysis range {a0}-{a1} not covered by data {data.first_year}-{data.last_year}")
    if cfg.synthetic_range is not None:
        s0 = cfg.synthetic_range[0]
        if s0 - cfg.presample_years < data.first_year:
            raise ValueError(f"need {cfg.presample_years} presample years before {s0}; data start in {data.first_year}")


def prepare(data: AccountingSeries, cfg: PipelineConfig) -> Prepared:
    validate_coverage(data, cfg)
    lm = to_log_scale(data, log=cfg.scale_mode == "log")
    start = None if lm.mask.all() else em_start(lm.values, lm.mask, cfg.ridge)
    return Prepared(lm, start)


def calculated_balance(collections, disbursements, years, first_year: int, last_year: int,
                       rates=None) -> float:
    """Total collections less total disbursements over ``first_year..last_year``.

    ``rates`` optionally gives a per-year rate for every year in the range;
    each year's net flow is then compounded forward to the range end.
    """
    years = np.asarray(years)
    sel = (years >= first_year) & (years <= last_year)
    c = np.asarray(collections, dtype=float)[sel]
    d = np.asarray(disbursements, dtype=float)[sel]
    if sel.sum() != last_year - first_year + 1:
        raise ValueError(f"years {first_year}-{last_year} not all present")
    if np.any(np.isnan(c)) or np.any(np.isnan(d)):
        raise ValueError("missing collections or disbursements in range")
    if rates is None:
        return float(c.sum() - d.sum())
    r = np.asarray(rates, dtype=float)
    if r.shape != c.shape:
        raise ValueError("rates must have one entry per year in range")
    growth = np.append(np.cumprod((1 + r[1:])[::-1])[::-1], 1.0)
    return float(np.sum((c - d) * growth))


def _completed_dollars(completed: CompletedMatrix, prep: Prepared) -> np.ndarray:
    if prep.matrix.log:
        return from_log_scale(completed.values, prep.matrix)
    out = completed.values.copy()
    out[completed.mask] = prep.matrix.dollars[completed.mask]
    return out


def _draw_completed(prep: Prepared, cfg: PipelineConfig, replicate_id: int):
    """Independent-chains imputation for one replicate, redrawing on nonpositive raw values."""
    lm = prep.matrix
    for attempt in range(TOLERANCES.max_redraws):
        rng = RngStream(cfg.seed, replicate_id, 2 * attempt)
        comp = impute_one(lm.values, lm.mask, prep.start, rng, cfg.burn_in, cfg.ridge)
        dollars = _completed_dollars(comp, prep)
        if lm.log or np.all(dollars[:, [_COLL, _DISB]] > 0):
            return comp, dollars, attempt
    raise ReplicateError(replicate_id, f"no positive raw-scale imputation in {TOLERANCES.max_redraws} draws")


def run_replicate(data: AccountingSeries | None, cfg: PipelineConfig, replicate_id: int,
                  prepared: Prepared | None = None, completed: CompletedMatrix | None = None,
                  redraws: int = 0) -> ReplicateResult:
    """One replicate: completed matrix, VAR refit, synthetic splice, totals."""
    prep = prepared if prepared is not None else prepare(data, cfg)
    try:
        if completed is None:
            completed, dollars, redraws = _draw_completed(prep, cfg, replicate_id)
        else:
            dollars = _completed_dollars(completed, prep)
        years = prep.years
        comp2 = dollars[:, [_COLL, _DISB]]
        final = comp2.copy()
        order = None
        radius = None
        model_dump = None
        if cfg.synthetic_range is not None:
            if np.any(comp2 <= 0):
                raise ValueError("nonpositive collections or disbursements cannot be log-modeled")
            logx = np.log(comp2).T
            if cfg.order_scan is not None:
                order = select_order(logx, *cfg.order_scan, with_trend=cfg.with_trend,
                                     include_cov_params=cfg.aicc_cov_params).chosen
            else:
                order = cfg.var_order
            model = fit_var(logx, order, cfg.with_trend)
            radius = stationarity_check(model)
            model_dump = model.to_dict()
            if radius >= TOLERANCES.stationarity_radius:
                logger.warning("replicate %d: nonstationary VAR fit (spectral radius %.4f)", replicate_id, radius)
            s0, s1 = cfg.synthetic_range
            i0 = int(s0 - years[0])
            i1 = int(s1 - years[0]) + 1
            rng = RngStream(cfg.seed, replicate_id, 2 * redraws + 1)
            sim = simulate_var(model, logx[:, i0 - order:i0], i1 - i0, rng, t0=i0 + 1)
            with np.errstate(over="ignore"):
                final[i0:i1] = np.exp(sim.T)
        a0, a1 = cfg.analysis_range
        sel = (years >= a0) & (years <= a1)
        tc = float(final[sel, 0].sum())
        td = float(final[sel, 1].sum())
        if not (np.isfinite(tc) and np.isfinite(td)):
            raise ValueError("non-finite totals (explosive synthetic path)")
        bal = calculated_balance(final[:, 0], final[:, 1], years, a0, a1)
    except ReplicateError:
        raise
    except (ImputationError, VarFitError, np.linalg.LinAlgError, ValueError) as exc:
        raise ReplicateError(replicate_id, str(exc)) from exc
    return ReplicateResult(replicate_id, years, comp2, final, tc, td, bal, order, radius, redraws, model_dump)


def _run_chunk(data, cfg, prep, ids, completed=None, redraws=None):
    out = []
    for j, rid in enumerate(ids):
        try:
            comp = None if completed is None else completed[j]
            nred = 0 if redraws is None else redraws[j]
            out.append(run_replicate(data, cfg, rid, prep, comp, nred))
        except ReplicateError as exc:
            out.append(exc)
    return out


def _single_chain(prep: Prepared, cfg: PipelineConfig):
    """Completed matrices from one thinned chain; raw-scale rejects are skipped."""
    lm = prep.matrix
    icfg = cfg.imputation_config()
    if lm.mask.all():
        comp = CompletedMatrix(lm.values.copy(), lm.mask.copy())
        return [comp] * cfg.n_replicates, [0] * cfg.n_replicates
    rng = RngStream(cfg.seed, SINGLE_CHAIN_STREAM)
    chain = _run_chain(lm.values, lm.mask, prep.start, rng, icfg.burn_in, icfg.iterations_between,
                       10**12, icfg.ridge, SINGLE_CHAIN_STREAM, None)
    accepted, rejected = [], []
    streak = 0
    for comp in chain:
        dollars = _completed_dollars(comp, prep)
        if lm.log or np.all(dollars[:, [_COLL, _DISB]] > 0):
            accepted.append(comp)
            rejected.append(streak)
            streak = 0
            if len(accepted) == cfg.n_replicates:
                break
        else:
            streak += 1
            if streak >= TOLERANCES.max_redraws:
                raise ReplicateError(len(accepted), "no positive raw-scale imputation in the chain")
    return accepted, rejected


@dataclass
class RunOutcome:
    results: list[ReplicateResult]
    failed: list[int]
    failures: dict[int, str]


def run_pipeline(data: AccountingSeries, cfg: PipelineConfig, threads: int = 1,
                 chunk_size: int = 50) -> RunOutcome:
    """Run every replicate; results are ordered by replicate id whatever ``threads`` is."""
    prep = prepare(data, cfg)
    ids = list(range(cfg.n_replicates))
    chunks = [ids[i:i + chunk_size] for i in range(0, len(ids), chunk_size)]
    if cfg.chain_mode == "single":
        comps, reds = _single_chain(prep, cfg)
        extra = [(comps[c[0]:c[-1] + 1], reds[c[0]:c[-1] + 1]) for c in chunks]
    else:
        extra = [(None, None)] * len(chunks)
    if threads > 1 and len(chunks) > 1:
        from joblib import Parallel, delayed

        parts = Parallel(n_jobs=threads, backend="loky")(
            delayed(_run_chunk)(None, cfg, prep, c, e[0], e[1]) for c, e in zip(chunks, extra))
    else:
        parts = [_run_chunk(None, cfg, prep, c, e[0], e[1]) for c, e in zip(chunks, extra)]
    results, failed, failures = [], [], {}
    for item in (x for part in parts for x in part):
        if isinstance(item, ReplicateError):
            if not cfg.salvage_failed:
                raise item
            logger.warning("dropping %s", item)
            failed.append(item.replicate_id)
            failures[item.replicate_id] = str(item)
        else:
            results.append(item)
    return RunOutcome(results, failed, failures)
