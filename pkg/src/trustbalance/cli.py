"""Command-line front end.

Exit codes: 0 success, 1 input/validation failure, 2 numerical failure,
64 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .fixture import make_fixture
from .imputation import ImputationError, em_start, impute_one, write_trace_csv
from .ingest import (
    DataError,
    footing_csv,
    footing_residuals,
    missingness_summary,
    read_accounting_csv,
    to_csv,
    to_log_scale,
)
from .pipeline import (
    DEFAULT_PERCENTILES,
    REPORTED_STATED_BALANCE,
    PipelineConfig,
    ReplicateError,
    run_pipeline,
)
from .report import balances_csv, bands_csv, provenance, summarize
from .stochastic import RngStream
from .var import VarFitError, select_order

EXIT_OK, EXIT_DATA, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2, 64

logger = logging.getLogger("trustbalance")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(s: str) -> int:
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {s!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(s: str) -> int:
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _year_range(s: str):
    if s.strip().lower() == "none":
        return None
    try:
        lo, hi = (int(x) for x in s.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi, got {s!r}") from None
    if lo > hi:
        raise argparse.ArgumentTypeError(f"empty range {s!r}")
    return lo, hi


def _strict_range(s: str):
    r = _year_range(s)
    if r is None:
        raise argparse.ArgumentTypeError("a lo:hi range is required")
    return r


def _probs(s: str):
    try:
        ps = tuple(float(x) for x in s.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad probability list {s!r}") from None
    if not ps or not all(0 < p < 1 for p in ps):
        raise argparse.ArgumentTypeError("probabilities must lie strictly between 0 and 1")
    return ps


def _money(s: str) -> float:
    return float(s.replace(",", "").lstrip("$"))


def _add_input(p):
    p.add_argument("--input", required=True, type=Path, help="accounting CSV (year,collections,disbursements,balance,headright)")
    p.add_argument("--na-values", default="", help="comma-separated extra tokens treated as missing (blank is always missing)")


def _add_imputation(p, burn_in=500):
    p.add_argument("--burn-in", type=_nonneg_int, default=burn_in, help=f"MCMC iterations before an imputation is taken (default {burn_in})")
    p.add_argument("--chain-mode", choices=("independent", "single"), default="independent",
                   help="one fresh chain per imputation, or one chain thinned (default independent)")
    p.add_argument("--iterations-between", type=_positive_int, default=100, help="thinning interval in single-chain mode (default 100)")
    p.add_argument("--scale-mode", choices=("log", "raw"), default="log", help="impute dollar variables on log or raw scale (default log)")
    p.add_argument("--ridge", type=float, default=1e-8, help="relative diagonal ridge used when a covariance fails a PD check (default 1e-8)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trustbalance", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="impute, regenerate and summarize calculated balances")
    _add_input(run)
    run.add_argument("--output-dir", required=True, type=Path, help="directory for report.json, balances.csv, bands.csv, config_echo.json")
    run.add_argument("--seed", required=True, type=_nonneg_int, help="random seed (required)")
    run.add_argument("--replicates", type=_positive_int, default=10_000, help="number of replicates (default 10000)")
    _add_imputation(run)
    run.add_argument("--var-order", type=_positive_int, default=7, help="VAR order p (default 7)")
    run.add_argument("--order-scan", type=_strict_range, default=None, help="lo:hi, choose p per replicate by minimum AICC instead of --var-order")
    run.add_argument("--aicc-cov-params", action="store_true", help="count covariance parameters in the AICC penalty")
    run.add_argument("--with-trend", action="store_true", help="add a linear time trend to the VAR")
    run.add_argument("--synthetic-range", type=_year_range, default=(1887, 1995), help="lo:hi years replaced by synthetic values, or 'none' (default 1887:1995)")
    run.add_argument("--analysis-range", type=_strict_range, default=(1887, 2007), help="lo:hi years totalled (default 1887:2007)")
    run.add_argument("--percentiles", type=_probs, default=DEFAULT_PERCENTILES, help="comma-separated probabilities to report")
    run.add_argument("--stated-balance", type=_money, default=REPORTED_STATED_BALANCE, help="stated balance compared against (default 423700000)")
    run.add_argument("--threads", type=_positive_int, default=1, help="worker processes; never changes outputs (default 1)")
    run.add_argument("--salvage-failed-replicates", action="store_true", help="drop and count failed replicates instead of aborting")
    run.add_argument("--dump-models", action="store_true", help="also write models.jsonl with each replicate's fitted VAR")
    run.add_argument("--trace-chains", type=_nonneg_int, default=0, help="write chain_trace.csv for the first N imputation chains")

    diag = sub.add_parser("diagnose", help="footing residuals and missingness summary")
    _add_input(diag)
    diag.add_argument("--output-dir", required=True, type=Path, help="directory for footing.csv and missingness.json")
    diag.add_argument("--analysis-range", type=_strict_range, default=None, help="lo:hi years for the missingness summary (default: whole file)")

    sel = sub.add_parser("select-order", help="AICC order scan on a few imputed series")
    _add_input(sel)
    sel.add_argument("--seed", required=True, type=_nonneg_int, help="random seed (required)")
    sel.add_argument("--output-dir", type=Path, default=None, help="directory for order_selection.json")
    sel.add_argument("--imputations", type=_positive_int, default=5, help="imputed series to scan (default 5)")
    _add_imputation(sel)
    sel.add_argument("--order-scan", type=_strict_range, default=(1, 7), help="lo:hi orders to scan (default 1:7)")
    sel.add_argument("--aicc-cov-params", action="store_true", help="count covariance parameters in the AICC penalty")
    sel.add_argument("--with-trend", action="store_true", help="add a linear time trend to the VAR")

    fix = sub.add_parser("fixture", help="write a synthetic 1880-2007 panel and its true parameters")
    fix.add_argument("--output-dir", required=True, type=Path, help="directory for fixture.csv and fixture_truth.json")
    fix.add_argument("--seed", required=True, type=_nonneg_int, help="random seed (required)")
    fix.add_argument("--missing-frac", type=float, default=1 / 3, help="share of 1887-2007 years with collections missing (default 1/3)")
    fix.add_argument("--footing-noise", type=float, default=0.0, help="balance perturbation as a fraction of mean collections (default 0: exact footing)")
    return parser


def _load(args):
    na = [t for t in args.na_values.split(",") if t.strip()]
    return read_accounting_csv(args.input, na)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n")


def cmd_run(args) -> int:
    data = _load(args)
    try:
        cfg = PipelineConfig(
            seed=args.seed, n_replicates=args.replicates, analysis_range=args.analysis_range,
            synthetic_range=args.synthetic_range, var_order=args.var_order, order_scan=args.order_scan,
            with_trend=args.with_trend, aicc_cov_params=args.aicc_cov_params, burn_in=args.burn_in,
            chain_mode=args.chain_mode, iterations_between=args.iterations_between,
            scale_mode=args.scale_mode, ridge=args.ridge, percentiles=args.percentiles,
            stated_balance=args.stated_balance, salvage_failed=args.salvage_failed_replicates)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if cfg.n_replicates < 2:
        raise UsageError("at least 2 replicates are needed for a distribution summary")
    outcome = run_pipeline(data, cfg, threads=args.threads)
    report = summarize(outcome.results, cfg, n_failed=len(outcome.failed))
    out = args.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "balances.csv").write_text(balances_csv(outcome.results, cfg.seed))
    (out / "bands.csv").write_text(bands_csv(report.bands, cfg.seed))
    _write_json(out / "config_echo.json", {
        "config": cfg.to_dict(),
        "input": str(args.input),
        "threads": args.threads,
        "failed_replicates": outcome.failures,
        "provenance": provenance(cfg.seed),
    })
    if args.dump_models:
        with open(out / "models.jsonl", "w") as fh:
            fh.write(json.dumps({"provenance": provenance(cfg.seed)}, sort_keys=True) + "\n")
            for r in outcome.results:
                fh.write(json.dumps({"replicate_id": r.replicate_id, "model": r.model}, sort_keys=True) + "\n")
    if args.trace_chains:
        _dump_traces(data, cfg, args.trace_chains, out / "chain_trace.csv")
    q = report.quantiles
    print(f"replicates={report.n_replicates} failed={report.n_failed} mean={report.mean:,.0f} "
          f"median={report.median:,.0f} ci95=[{q['0.025']:,.0f}, {q['0.975']:,.0f}]")
    return EXIT_OK


def _dump_traces(data, cfg, n_chains, path):
    lm = to_log_scale(data, log=cfg.scale_mode == "log")
    if lm.mask.all():
        return
    start = em_start(lm.values, lm.mask, cfg.ridge)
    trace: list = []
    for m in range(min(n_chains, cfg.n_replicates)):
        impute_one(lm.values, lm.mask, start, RngStream(cfg.seed, m, 0), cfg.burn_in, cfg.ridge, trace)
    if trace:
        p = provenance(cfg.seed)
        write_trace_csv(trace, path, names=["year", "collections", "disbursements", "balance", "headright"],
                        comment=f"seed={cfg.seed} generator={p['generator']} {p['package']}={p['version']}")


def cmd_diagnose(args) -> int:
    data = _load(args)
    rng = args.analysis_range or (data.first_year, data.last_year)
    summary = missingness_summary(data, *rng)
    rows = footing_residuals(data)
    out = args.output_dir
    out.mkdir(parents=True, exist_ok=True)
    p = provenance(0)
    tag = f"source={args.input.name} {p['package']}={p['version']}"
    (out / "footing.csv").write_text(footing_csv(rows, tag))
    _write_json(out / "missingness.json", {**summary.to_dict(), "provenance": {"package": p["package"], "version": p["version"]}})
    defined = [r for r in rows if r.residual is not None]
    nonzero = [r for r in defined if round(r.residual, 2) != 0]
    print(f"years={len(data)} footing_defined={len(defined)} footing_nonzero={len(nonzero)}")
    for name, frac in summary.fractions.items():
        print(f"  {name:14s} missing {summary.counts[name]:4d}/{summary.n_years} ({frac:.3f})")
    return EXIT_OK


def cmd_select_order(args) -> int:
    data = _load(args)
    lm = to_log_scale(data, log=args.scale_mode == "log")
    lo, hi = args.order_scan
    start = None if lm.mask.all() else em_start(lm.values, lm.mask, args.ridge)
    results = []
    print("imputation " + " ".join(f"{'p=' + str(p):>12s}" for p in range(lo, hi + 1)) + "  chosen")
    for m in range(args.imputations):
        if start is None:
            vals = lm.values
        else:
            vals = impute_one(lm.values, lm.mask, start, RngStream(args.seed, m, 0), args.burn_in, args.ridge).values
        coll_disb = vals[:, [1, 2]]
        if args.scale_mode == "raw":
            if np.any(coll_disb <= 0):
                raise ImputationError(f"imputation {m}: nonpositive raw-scale value; rerun with --scale-mode log")
            coll_disb = np.log(coll_disb)
        try:
            sel = select_order(coll_disb.T, lo, hi, with_trend=args.with_trend,
                               include_cov_params=args.aicc_cov_params)
        except ValueError as exc:
            raise VarFitError(str(exc)) from exc
        results.append({"imputation": m, **sel.to_dict()})
        cells = " ".join(f"{'failed' if s is None else format(s, '.3f'):>12s}" for s in sel.scores)
        print(f"{m:10d} {cells}  {sel.chosen}")
    if args.output_dir is not None:
        args.output_dir.mkdir(parents=True, exist_ok=True)
        _write_json(args.output_dir / "order_selection.json",
                    {"order_scan": [lo, hi], "selections": results, "provenance": provenance(args.seed)})
    return EXIT_OK


def cmd_fixture(args) -> int:
    if not 0 <= args.missing_frac < 1:
        raise UsageError("--missing-frac must be in [0, 1)")
    fx = make_fixture(args.seed, missing_frac=args.missing_frac, footing_noise=args.footing_noise)
    out = args.output_dir
    out.mkdir(parents=True, exist_ok=True)
    p = provenance(args.seed)
    (out / "fixture.csv").write_text(to_csv(fx.series, comment=f"synthetic fixture seed={args.seed} generator={p['generator']} {p['package']}={p['version']}"))
    _write_json(out / "fixture_truth.json", {**fx.truth, "provenance": p})
    print(f"wrote {out / 'fixture.csv'} ({len(fx.series)} years)")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "diagnose": cmd_diagnose, "select-order": cmd_select_order, "fixture": cmd_fixture}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, IsADirectoryError, UnicodeDecodeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ReplicateError, ImputationError, VarFitError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # configuration that parses but does not fit the data (e.g. ranges outside the file)
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
