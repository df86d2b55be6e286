"""Constant-maturity par yields, zero-curve bootstrap and holding returns."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from datetime import date
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq, least_squares

log = logging.getLogger(__name__)

TENOR_LABELS = {
    "1MO": 1 / 12, "3MO": 0.25, "6MO": 0.5, "1": 1.0, "2": 2.0, "3": 3.0,
    "5": 5.0, "7": 7.0, "10": 10.0, "20": 20.0, "30": 30.0,
}
YIELD_BOUNDS = (-0.05, 0.50)
MONEY_MARKET_MAX = 1.0
MIN_TENORS = 4
DAYS_PER_YEAR = 365.0


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def year_fraction(start: date, end: date) -> float:
    """ACT/365 year fraction."""
    return (end - start).days / DAYS_PER_YEAR


def _tenor_from_label(label: str) -> float | None:
    key = label.strip().upper()
    if key.startswith("DGS"):
        key = key[3:]
    if key.endswith("Y") and key[:-1].isdigit():
        key = key[:-1]
    return TENOR_LABELS.get(key)


@dataclass(frozen=True)
class CmtPanel:
    """Par yields by date and tenor, decimal units, NaN where absent."""

    dates: tuple[date, ...]
    maturities: np.ndarray
    yields: np.ndarray

    def __post_init__(self):
        if self.yields.shape != (len(self.dates), len(self.maturities)):
            raise DataError("yield matrix shape does not match dates x maturities")
        if np.any(np.diff(self.maturities) <= 0):
            raise DataError("maturities must be strictly increasing")
        for i in range(1, len(self.dates)):
            if self.dates[i] <= self.dates[i - 1]:
                raise DataError(f"dates not strictly increasing: {self.dates[i - 1]} then {self.dates[i]}")
        present = self.yields[np.isfinite(self.yields)]
        if present.size and (present.min() < YIELD_BOUNDS[0] or present.max() > YIELD_BOUNDS[1]):
            raise DataError("yield outside [-0.05, 0.50]")

    def row(self, i: int) -> tuple[date, np.ndarray, np.ndarray]:
        return self.dates[i], self.maturities, self.yields[i]

    def drop_tenor(self, tenor: float, before: date | None = None) -> "CmtPanel":
        """Copy with one tenor blanked, optionally only for dates before ``before``."""
        y = self.yields.copy()
        j = int(np.argmin(np.abs(self.maturities - tenor)))
        rows = [i for i, d in enumerate(self.dates) if before is None or d < before]
        y[rows, j] = np.nan
        return CmtPanel(self.dates, self.maturities, y)


def parse_cmt_csv(source) -> CmtPanel:
    """Read a FRED-style constant-maturity yield table.

    Args:
        source: Path, text or binary stream.  The first column holds ISO dates,
            the remaining columns are tenor labels such as ``1MO`` or ``DGS10``.
            Yields are in percent; ``.`` or empty cells mark missing values.

    Raises:
        DataError: For unknown headers, malformed dates or numbers, duplicate or
            unordered dates, or yields out of range.  Messages carry the 1-based
            line number of the offending row.
    """
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise FileNotFoundError(f"yield file not found: {path}")
        text = path.read_text()
    else:
        raw = source.read()
        text = raw.decode("utf-8-sig") if isinstance(raw, bytes) else raw
    text = text.lstrip("﻿")
    first = text.splitlines()[0] if text else ""
    delimiter = "\t" if first.count("\t") > first.count(",") else ","
    reader = csv.reader(io.StringIO(text), delimiter=delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("empty yield file") from None
    tenors = []
    for label in header[1:]:
        tenor = _tenor_from_label(label)
        if tenor is None:
            raise DataError(f"line 1: unknown tenor column {label.strip()!r}")
        tenors.append(tenor)
    order = np.argsort(tenors)
    if len(set(tenors)) != len(tenors):
        raise DataError("line 1: duplicate tenor columns")

    dates: list[date] = []
    rows: list[list[float]] = []
    for lineno, record in enumerate(reader, start=2):
        if not record or all(not c.strip() for c in record):
            continue
        if len(record) != len(header):
            raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(record)}")
        try:
            day = date.fromisoformat(record[0].strip())
        except ValueError:
            raise DataError(f"line {lineno}: malformed date {record[0].strip()!r}") from None
        if dates and day == dates[-1]:
            raise DataError(f"line {lineno}: duplicate date {day}")
        if dates and day < dates[-1]:
            raise DataError(f"line {lineno}: dates out of order, {dates[-1]} followed by {day}")
        values = []
        for cell in record[1:]:
            cell = cell.strip()
            if cell in ("", "."):
                values.append(math.nan)
                continue
            try:
                pct = float(cell)
            except ValueError:
                raise DataError(f"line {lineno}: non-numeric yield {cell!r}") from None
            val = pct / 100.0
            if not YIELD_BOUNDS[0] <= val <= YIELD_BOUNDS[1]:
                raise DataError(f"line {lineno}: yield {cell}% outside [-5%, 50%]")
            values.append(val)
        dates.append(day)
        rows.append(values)
    yields = np.array(rows, dtype=float).reshape(len(rows), len(tenors))[:, order]
    return CmtPanel(tuple(dates), np.asarray(tenors)[order], yields)


def missing_spans(panel: CmtPanel) -> dict[float, list[tuple[date, date]]]:
    """Runs of consecutive missing observations per tenor, inclusive bounds."""
    spans: dict[float, list[tuple[date, date]]] = {}
    for j, tenor in enumerate(panel.maturities):
        missing = ~np.isfinite(panel.yields[:, j])
        runs = []
        start = None
        for i, flag in enumerate(missing):
            if flag and start is None:
                start = i
            if not flag and start is not None:
                runs.append((panel.dates[start], panel.dates[i - 1]))
                start = None
        if start is not None:
            runs.append((panel.dates[start], panel.dates[-1]))
        spans[float(tenor)] = runs
    return spans


# Zero curves ---------------------------------------------------------------

@dataclass(frozen=True)
class ZeroCurve:
    """Continuously compounded zero yields at knot tenors.

    Discount factors between knots come from a natural cubic spline on
    ``log P`` through the knots and the origin.
    """

    date: date
    tenors: np.ndarray
    zero_yields: np.ndarray

    def __post_init__(self):
        tenors = np.asarray(self.tenors, float)
        if np.any(np.diff(tenors) <= 0) or tenors[0] <= 0:
            raise DataError(f"{self.date}: tenors must be positive and strictly increasing")
        disc = np.exp(-tenors * np.asarray(self.zero_yields, float))
        if np.any(disc <= 0) or np.any(disc > 1.05):
            raise DataError(f"{self.date}: discount factors outside (0, 1.05]")
        object.__setattr__(self, "tenors", tenors)
        object.__setattr__(self, "zero_yields", np.asarray(self.zero_yields, float))
        knots = np.concatenate([[0.0], tenors])
        logp = np.concatenate([[0.0], -tenors * self.zero_yields])
        object.__setattr__(self, "_spline", CubicSpline(knots, logp, bc_type="natural"))

    @property
    def max_tenor(self) -> float:
        return float(self.tenors[-1])

    def discount(self, tau) -> np.ndarray:
        """Discount factor at maturities ``tau`` (years, within ``[0, max_tenor]``)."""
        tau = np.asarray(tau, float)
        if np.any(tau < 0) or np.any(tau > self.max_tenor + 1e-12):
            bad = tau[(tau < 0) | (tau > self.max_tenor + 1e-12)].ravel()[0]
            raise DataError(f"{self.date}: tenor {bad:g}y outside curve range [0, {self.max_tenor:g}]")
        return np.exp(self._spline(tau))

    def zero_yield(self, tau) -> np.ndarray:
        tau = np.asarray(tau, float)
        return -np.log(self.discount(tau)) / tau

    def par_yield(self, tenor: float) -> float:
        """Quoted yield implied by the curve, using the ingest conventions."""
        if tenor <= MONEY_MARKET_MAX + 1e-12:
            return float((1.0 / self.discount(tenor) - 1.0) / tenor)
        times = _coupon_times(tenor)
        annuity = 0.5 * self.discount(times).sum()
        return float((1.0 - self.discount(tenor)) / annuity)


def _coupon_times(tenor: float) -> np.ndarray:
    n = int(round(2 * tenor))
    return np.arange(1, n + 1) / 2.0


def bootstrap_zero_curve(day: date, tenors, par_yields, min_tenors: int = MIN_TENORS) -> ZeroCurve | None:
    """Bootstrap a zero curve from one row of par quotes.

    Tenors up to one year are simple-interest zero quotes; longer tenors are
    semiannual par bonds whose intermediate coupon dates are discounted off
    the same spline that is being fitted.  All knots are solved jointly so
    that every quote is repriced exactly.

    Args:
        day: Curve date.
        tenors: Quote tenors in years.
        par_yields: Quotes in decimal, NaN for absent.
        min_tenors: Minimum number of present quotes.

    Returns:
        The curve, or ``None`` with a logged diagnostic when too few quotes
        are present.

    Raises:
        DataError: If a quote implies a non-positive discount factor or the
            joint solve fails to reprice the inputs.
    """
    tenors = np.asarray(tenors, float)
    par = np.asarray(par_yields, float)
    keep = np.isfinite(par)
    if keep.sum() < min_tenors:
        log.info("%s: skipped, only %d quoted tenors", day, int(keep.sum()))
        return None
    tenors, par = tenors[keep], par[keep]
    if tenors.max() > 30.0 + 1e-9:
        raise DataError(f"{day}: tenor above 30y")

    # sequential guess: money-market quotes are exact, bonds priced off a flat extension
    logp = np.empty_like(tenors)
    for j, (tau, y) in enumerate(zip(tenors, par)):
        if tau <= MONEY_MARKET_MAX + 1e-12:
            gross = 1.0 + y * tau
            if gross <= 0:
                raise DataError(f"{day}: negative implied discount factor at {tau:g}y")
            logp[j] = -math.log(gross)
        else:
            known_t = np.concatenate([[0.0], tenors[:j]])
            known_l = np.concatenate([[0.0], logp[:j]])
            times = _coupon_times(tau)
            early = times <= known_t[-1]
            carry = 0.5 * y * np.exp(np.interp(times[early], known_t, known_l)).sum()
            if carry >= 1.0:
                raise DataError(f"{day}: negative implied discount factor at {tau:g}y")

            def par_gap(fwd):
                # flat forward beyond the last solved knot
                late = known_l[-1] - fwd * (times[~early] - known_t[-1])
                return carry + 0.5 * y * np.exp(late).sum() + np.exp(late[-1]) - 1.0

            hi = 1.0
            while par_gap(hi) > 0:
                hi *= 2.0
            fwd = brentq(par_gap, -1.0, hi, xtol=1e-14)
            logp[j] = known_l[-1] - fwd * (tau - known_t[-1])

    bonds = tenors > MONEY_MARKET_MAX + 1e-12
    if bonds.any():
        knots = np.concatenate([[0.0], tenors])

        def residuals(bond_logp):
            full = logp.copy()
            full[bonds] = bond_logp
            spline = CubicSpline(knots, np.concatenate([[0.0], full]), bc_type="natural")
            out = []
            for tau, y in zip(tenors[bonds], par[bonds]):
                times = _coupon_times(tau)
                out.append(0.5 * y * np.exp(spline(times)).sum() + np.exp(spline(tau)) - 1.0)
            return np.array(out)

        sol = least_squares(residuals, logp[bonds], xtol=1e-15, ftol=1e-15, gtol=1e-15)
        logp[bonds] = sol.x
    zero = -logp / tenors
    curve = ZeroCurve(day, tenors, zero)
    worst = max(abs(curve.par_yield(t) - y) for t, y in zip(tenors, par))
    if worst > 1e-6:
        raise DataError(f"{day}: bootstrap failed to reprice quotes (max error {worst * 1e4:.3f} bp)")
    return curve


def bootstrap_panel(panel: CmtPanel, min_tenors: int = MIN_TENORS) -> tuple[list[ZeroCurve], list[date]]:
    """Bootstrap every row; returns the curves and the dates that were skipped."""
    curves, skipped = [], []
    for i in range(len(panel.dates)):
        day, tenors, par = panel.row(i)
        curve = bootstrap_zero_curve(day, tenors, par, min_tenors=min_tenors)
        if curve is None:
            skipped.append(day)
        else:
            curves.append(curve)
    return curves, skipped


def holding_return(curve_t: ZeroCurve, curve_next: ZeroCurve, bond_maturity: float, horizon: float) -> float:
    """Gross return from holding a zero-coupon bond over ``horizon``.

    The bond has ``bond_maturity`` years to run at the first date and
    ``bond_maturity - horizon`` at the second.
    """
    if bond_maturity < horizon - 1e-12:
        raise DataError("bond maturity must not be shorter than the holding horizon")
    remaining = max(bond_maturity - horizon, 0.0)
    p_now = float(curve_t.discount(bond_maturity))
    p_next = 1.0 if remaining <= 1e-12 else float(curve_next.discount(remaining))
    return p_next / p_now


@dataclass(frozen=True)
class YieldPanel:
    """Zero-coupon yields at fixed tenors, NaN where a tenor is not available."""

    dates: tuple[date, ...]
    tenors: np.ndarray
    yields: np.ndarray

    def __post_init__(self):
        if self.yields.shape != (len(self.dates), len(self.tenors)):
            raise DataError("yield matrix shape does not match dates x tenors")

    def __len__(self) -> int:
        return len(self.dates)

    def head(self, n: int) -> "YieldPanel":
        return YieldPanel(self.dates[:n], self.tenors, self.yields[:n])


def zero_yield_panel(curves: list[ZeroCurve], tenors) -> YieldPanel:
    """Zero yields at the requested tenors; tenors beyond a curve's range are NaN."""
    tenors = np.asarray(tenors, float)
    out = np.full((len(curves), len(tenors)), np.nan)
    for i, curve in enumerate(curves):
        ok = tenors <= curve.max_tenor + 1e-12
        out[i, ok] = curve.zero_yield(tenors[ok])
    return YieldPanel(tuple(c.date for c in curves), tenors, out)


def write_curves_csv(curves: list[ZeroCurve], path, header_lines=()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(["date", "tenor", "zero_yield"])
        for c in curves:
            for t, y in zip(c.tenors, c.zero_yields):
                writer.writerow([c.date.isoformat(), f"{t:.10g}", f"{y:.12g}"])


def read_curves_csv(path) -> list[ZeroCurve]:
    rows: dict[date, list[tuple[float, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        next(reader)
        for rec in reader:
            rows.setdefault(date.fromisoformat(rec[0]), []).append((float(rec[1]), float(rec[2])))
    curves = []
    for day in sorted(rows):
        pts = sorted(rows[day])
        curves.append(ZeroCurve(day, np.array([p[0] for p in pts]), np.array([p[1] for p in pts])))
    return curves


def quarter_start_indices(dates) -> list[int]:
    """Index of the first available date in each calendar quarter."""
    out, seen = [], set()
    for i, d in enumerate(dates):
        key = (d.year, (d.month - 1) // 3)
        if key not in seen:
            seen.add(key)
            out.append(i)
    return out
