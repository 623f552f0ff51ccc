"""Annual accounting panel: parsing, validation, diagnostics and scale transforms."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DOLLAR_FIELDS = ("collections", "disbursements", "balance", "headright")
COLUMNS = ("year",) + DOLLAR_FIELDS


class DataError(ValueError):
    """Input file does not satisfy the accounting panel schema."""


@dataclass(frozen=True)
class YearRecord:
    year: int
    collections: float | None = None
    disbursements: float | None = None
    balance: float | None = None
    headright: float | None = None

    def get(self, name: str) -> float | None:
        return getattr(self, name)


@dataclass(frozen=True)
class AccountingSeries:
    rows: tuple[YearRecord, ...]

    def __post_init__(self):
        rows = tuple(self.rows)
        object.__setattr__(self, "rows", rows)
        if not rows:
            raise DataError("series has no rows")
        for prev, cur in zip(rows, rows[1:]):
            if cur.year == prev.year:
                raise DataError(f"duplicate year {cur.year}")
            if cur.year != prev.year + 1:
                raise DataError(f"years not consecutive: {prev.year} then {cur.year}")
        for r in rows:
            for name in DOLLAR_FIELDS:
                v = r.get(name)
                if v is not None and not (math.isfinite(v) and v > 0):
                    raise DataError(f"{name} in {r.year} must be a positive amount, got {v}")
            if r.headright is None:
                raise DataError(f"headright missing in {r.year}; it must be fully observed")

    @property
    def first_year(self) -> int:
        return self.rows[0].year

    @property
    def last_year(self) -> int:
        return self.rows[-1].year

    @property
    def years(self) -> np.ndarray:
        return np.array([r.year for r in self.rows], dtype=int)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        """Values of one variable as floats, NaN where missing."""
        if name == "year":
            return self.years.astype(float)
        return np.array([np.nan if r.get(name) is None else r.get(name) for r in self.rows])

    def index_of(self, year: int) -> int:
        if not self.first_year <= year <= self.last_year:
            raise KeyError(f"year {year} outside {self.first_year}-{self.last_year}")
        return year - self.first_year


def _parse_money(cell: str, *, year, name, na_values: frozenset[str]) -> float | None:
    s = cell.strip()
    if not s or s in na_values:
        return None
    neg = s.startswith("-")
    if neg:
        s = s[1:].lstrip()
    if s.startswith("$"):
        s = s[1:]
    s = s.replace(",", "")
    try:
        v = float(s)
    except ValueError:
        raise DataError(f"non-numeric {name} value {cell!r} in year {year}") from None
    if neg:
        v = -v
    if not math.isfinite(v):
        raise DataError(f"non-finite {name} value {cell!r} in year {year}")
    if v <= 0:
        raise DataError(f"non-positive {name} value {cell!r} in year {year}")
    return v


def parse_accounting_csv(text: str, na_values: Iterable[str] = ()) -> AccountingSeries:
    """Parse the ``year,collections,disbursements,balance,headright`` table.

    Header names are matched case-insensitively in any order; extra columns
    are ignored. A blank or whitespace-only cell is the missing marker;
    ``na_values`` adds further tokens that map to missing.
    """
    if text.startswith("﻿"):
        text = text[1:]
    na = frozenset(v.strip() for v in na_values)
    lines = [ln for ln in io.StringIO(text, newline="") if not ln.lstrip().startswith("#")]
    reader = csv.reader(lines)
    header = None
    for row in reader:
        if any(c.strip() for c in row):
            header = [c.strip().lower() for c in row]
            break
    if header is None:
        raise DataError("empty input: no header row")
    missing = [c for c in COLUMNS if c not in header]
    if missing:
        raise DataError(f"header lacks column(s): {', '.join(missing)}")
    pos = {c: header.index(c) for c in COLUMNS}

    records = []
    for row in reader:
        if not any(c.strip() for c in row):
            continue
        row = row + [""] * (len(header) - len(row))
        ycell = row[pos["year"]].strip()
        try:
            year = int(ycell)
        except ValueError:
            try:
                yf = float(ycell)
            except ValueError:
                raise DataError(f"invalid year {ycell!r}") from None
            if not yf.is_integer():
                raise DataError(f"invalid year {ycell!r}")
            year = int(yf)
        vals = {n: _parse_money(row[pos[n]], year=year, name=n, na_values=na) for n in DOLLAR_FIELDS}
        records.append(YearRecord(year, **vals))
    if not records:
        raise DataError("no data rows")
    return AccountingSeries(tuple(records))


def read_accounting_csv(path, na_values: Iterable[str] = ()) -> AccountingSeries:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_accounting_csv(fh.read(), na_values)


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def to_csv(series: AccountingSeries, comment: str | None = None) -> str:
    """Serialize a series in the input schema; ``parse_accounting_csv`` reads it back unchanged."""
    buf = io.StringIO()
    if comment:
        for line in comment.splitlines():
            buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in series.rows:
        w.writerow([r.year] + [_fmt(r.get(n)) for n in DOLLAR_FIELDS])
    return buf.getvalue()


@dataclass(frozen=True)
class FootingRow:
    year: int
    residual: float | None
    coll_less_disb: float | None
    balance_change: float | None


def footing_residuals(s: AccountingSeries) -> list[FootingRow]:
    """Per-year footing residual ``B(t) - (B(t-1) + C(t) - D(t))``.

    The residual is ``None`` unless all four components are present. The
    scatter pair (collections less disbursements, change in balance) is
    reported wherever its own components exist.
    """
    out = []
    prev_bal = None
    for r in s.rows:
        cld = None if r.collections is None or r.disbursements is None else r.collections - r.disbursements
        chg = None if r.balance is None or prev_bal is None else r.balance - prev_bal
        res = None if cld is None or chg is None else chg - cld
        out.append(FootingRow(r.year, res, cld, chg))
        prev_bal = r.balance
    return out


def footing_csv(rows: Sequence[FootingRow], comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["year", "residual", "coll_less_disb", "balance_change"])
    for r in rows:
        # rounded to the cent for display only
        w.writerow([r.year] + ["" if v is None else f"{v:.2f}" for v in (r.residual, r.coll_less_disb, r.balance_change)])
    return buf.getvalue()


@dataclass(frozen=True)
class MissingnessSummary:
    first_year: int
    last_year: int
    n_years: int
    counts: dict[str, int]
    fractions: dict[str, float]
    # year -> one character per variable in DOLLAR_FIELDS order, "1" = missing
    patterns: dict[int, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "first_year": self.first_year,
            "last_year": self.last_year,
            "n_years": self.n_years,
            "variables": list(DOLLAR_FIELDS),
            "counts": dict(self.counts),
            "fractions": dict(self.fractions),
            "patterns": {str(y): p for y, p in self.patterns.items()},
        }


def missingness_summary(s: AccountingSeries, first_year: int | None = None,
                        last_year: int | None = None) -> MissingnessSummary:
    lo = s.first_year if first_year is None else first_year
    hi = s.last_year if last_year is None else last_year
    if lo > hi or lo < s.first_year or hi > s.last_year:
        raise DataError(f"range {lo}-{hi} outside series {s.first_year}-{s.last_year}")
    rows = s.rows[lo - s.first_year: hi - s.first_year + 1]
    n = len(rows)
    counts = {name: sum(r.get(name) is None for r in rows) for name in DOLLAR_FIELDS}
    patterns = {r.year: "".join("1" if r.get(nm) is None else "0" for nm in DOLLAR_FIELDS) for r in rows}
    return MissingnessSummary(lo, hi, n, counts, {k: v / n for k, v in counts.items()}, patterns)


@dataclass(frozen=True)
class LogMatrix:
    """Numeric panel on the modeling scale.

    ``values`` is ``n x 5`` in ``COLUMNS`` order with NaN at missing cells;
    ``mask`` is True where a cell is observed. ``dollars`` keeps the original
    amounts so the inverse transform is exact on observed cells.
    """

    years: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    dollars: np.ndarray
    log: bool = True


def to_matrix(s: AccountingSeries) -> np.ndarray:
    return np.column_stack([s.column(c) for c in COLUMNS])


def to_log_scale(s: AccountingSeries, log: bool = True) -> LogMatrix:
    """Panel matrix with the dollar columns log-transformed (``log=False`` keeps dollars)."""
    raw = to_matrix(s)
    mask = ~np.isnan(raw)
    vals = raw.copy()
    if log:
        dollars = raw[:, 1:]
        present = ~np.isnan(dollars)
        if np.any(dollars[present] <= 0):
            raise DataError("log transform needs strictly positive amounts")
        with np.errstate(invalid="ignore"):
            vals[:, 1:] = np.log(dollars)
    return LogMatrix(s.years, vals, mask, raw, log)


def from_log_scale(values, reference: LogMatrix | None = None) -> np.ndarray:
    """Back-transform a modeling-scale matrix (``COLUMNS`` order) to dollars.

    Cells whose value is unchanged from ``reference`` get the original dollar
    amount back bit-for-bit; everything else is exponentiated.
    """
    if isinstance(values, LogMatrix):
        reference, values = values, values.values
    v = np.asarray(values, dtype=float)
    out = v.copy()
    if reference is None or reference.log:
        out[:, 1:] = np.exp(v[:, 1:])
    if reference is not None:
        same = reference.mask & (v == reference.values)
        out[same] = reference.dollars[same]
    return out
