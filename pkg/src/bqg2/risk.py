"""Realised and model-implied bond risk premia, Sharpe ratios and the
growth-optimality of the long bond."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import date

import numpy as np

from bqg2.eigenpair import Eigenpair, long_bond_path
from bqg2.kalman import ou_transition, psd_sqrt
from bqg2.market_data import ZeroCurve, holding_return, quarter_start_indices, year_fraction
from bqg2.measures import MeasureTag, drift_under
from bqg2.model import ModelParams
from bqg2.pde import PriceSurface, price_at

LONG_BOND = "LB"
TABLE_MATURITIES = (1.0, 2.0, 3.0, 5.0, 7.0, 10.0, 20.0, 30.0)
FORECAST_MATURITIES = (1.0, 2.0, 3.0, 5.0, 10.0, 20.0, 30.0)
MAX_REJECTED_FRACTION = 0.01


class InsufficientSampleError(ValueError):
    pass


@dataclass(frozen=True)
class ReturnRow:
    maturity: float | str
    mean_excess: float
    sd: float
    sharpe: float | None


@dataclass(frozen=True)
class ReturnTable:
    """Quarterly excess returns by maturity, with the long bond last."""

    rows: tuple[ReturnRow, ...]
    horizon: str
    sample: str

    def row(self, maturity) -> ReturnRow:
        for r in self.rows:
            if r.maturity == maturity:
                return r
        raise KeyError(maturity)

    def write_csv(self, path, header_lines=()) -> None:
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write(f"# sample: {self.sample}; horizon: {self.horizon}\n")
            w = csv.writer(fh)
            w.writerow(["statistic"] + [_label(r.maturity) for r in self.rows])
            w.writerow(["mean_excess"] + [f"{r.mean_excess:.6f}" for r in self.rows])
            w.writerow(["sd"] + [f"{r.sd:.6f}" for r in self.rows])
            w.writerow(["sharpe"] + ["" if r.sharpe is None else f"{r.sharpe:.4f}" for r in self.rows])


def _label(m) -> str:
    return m if isinstance(m, str) else f"{m:g}y"


def _summary(values: np.ndarray, maturity) -> ReturnRow:
    mean = float(values.mean())
    sd = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    sharpe = mean / sd if sd > 1e-14 else None
    return ReturnRow(maturity, mean, sd, sharpe)


def _quarterly_sample(curves: list[ZeroCurve], require_tenor: float) -> list[int]:
    avail = [i for i, c in enumerate(curves) if c.max_tenor >= require_tenor - 1e-9]
    dates = [curves[i].date for i in avail]
    return [avail[k] for k in quarter_start_indices(dates)]


def _consecutive_quarters(curves, picks):
    """Pairs of sample points exactly one calendar quarter apart."""
    pairs = []
    for a, b in zip(picks[:-1], picks[1:]):
        da, db = curves[a].date, curves[b].date
        qa = da.year * 4 + (da.month - 1) // 3
        qb = db.year * 4 + (db.month - 1) // 3
        if qb == qa + 1:
            pairs.append((a, b))
    return pairs


def realized_returns(curves: list[ZeroCurve], maturities=TABLE_MATURITIES, pair: Eigenpair | None = None,
                     states=None, require_tenor: float = 30.0):
    """Quarterly gross returns and risk-free returns on the sample mask.

    Returns:
        ``(dates, riskfree, returns)`` where ``returns`` maps each maturity
        (and the long bond when ``pair`` and ``states`` are given) to an array.
    """
    picks = _quarterly_sample(curves, require_tenor)
    pairs = _consecutive_quarters(curves, picks)
    if len(pairs) < 2:
        raise InsufficientSampleError("fewer than two overlapping quarterly returns")
    rf, out = [], {m: [] for m in maturities}
    for a, b in pairs:
        h = year_fraction(curves[a].date, curves[b].date)
        rf.append(1.0 / float(curves[a].discount(h)))
        for m in maturities:
            out[m].append(holding_return(curves[a], curves[b], m, h))
    result = {m: np.array(v) for m, v in out.items()}
    if pair is not None and states is not None:
        states = np.asarray(states, float)
        lb = []
        for a, b in pairs:
            path = long_bond_path(pair, [curves[a].date, curves[b].date], states[[a, b]])
            lb.append(path[1])
        result[LONG_BOND] = np.array(lb)
    return [curves[a].date for a, _ in pairs], np.array(rf), result


def realized_table(curves: list[ZeroCurve], pair: Eigenpair | None = None, states=None,
                   maturities=TABLE_MATURITIES, require_tenor: float = 30.0) -> ReturnTable:
    """Average quarterly excess returns, volatilities and Sharpe ratios.

    Sampling uses the first available date of each calendar quarter among
    dates whose curve reaches ``require_tenor``; only consecutive quarters
    form returns.  ``states`` must be aligned with ``curves``.

    Raises:
        InsufficientSampleError: With fewer than two quarterly returns.
    """
    dates, rf, rets = realized_returns(curves, maturities, pair, states, require_tenor)
    rows = tuple(_summary(r - rf, m) for m, r in rets.items())
    sample = f"{dates[0]}..{dates[-1]}, {len(dates)} quarters"
    return ReturnTable(rows, "quarterly", sample)


@dataclass(frozen=True)
class LogReturnTable:
    """Mean quarterly log returns of duration-matched positions."""

    durations: tuple[float, ...]
    maturities: tuple[float, ...]
    values: np.ndarray  # (len(durations), len(maturities))
    long_bond: float | None
    sample: str

    def write_csv(self, path, header_lines=()) -> None:
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write(f"# sample: {self.sample}\n")
            w = csv.writer(fh)
            w.writerow(["duration"] + [_label(m) for m in self.maturities] + [LONG_BOND])
            lb = "" if self.long_bond is None else f"{self.long_bond:.6f}"
            for d, row in zip(self.durations, self.values):
                w.writerow([f"{d:g}y"] + [f"{v:.6f}" for v in row] + [lb])


def duration_matched_table(curves: list[ZeroCurve], target_durations=(10.0, 20.0),
                           maturities=TABLE_MATURITIES, pair: Eigenpair | None = None, states=None,
                           require_tenor: float = 30.0) -> LogReturnTable:
    """Quarterly log returns of positions levered to a target duration.

    A zero-coupon bond's duration is its maturity, so the weight in the
    ``tau``-bond is ``D / tau`` with the remainder at the three-month rate.

    Raises:
        ValueError: If a weight is not positive.
    """
    if any(d <= 0 for d in target_durations) or any(m <= 0 for m in maturities):
        raise ValueError("durations and maturities must be positive")
    dates, rf, rets = realized_returns(curves, maturities, pair, states, require_tenor)
    vals = np.empty((len(target_durations), len(maturities)))
    for a, d in enumerate(target_durations):
        for b, m in enumerate(maturities):
            w = d / m
            gross = w * rets[m] + (1.0 - w) * rf
            if np.any(gross <= 0):
                raise ValueError(f"levered position at {m:g}y for duration {d:g}y loses everything")
            vals[a, b] = float(np.log(gross).mean())
    lb = float(np.log(rets[LONG_BOND]).mean()) if LONG_BOND in rets else None
    sample = f"{dates[0]}..{dates[-1]}, {len(dates)} quarters"
    return LogReturnTable(tuple(target_durations), tuple(maturities), vals, lb, sample)


def wealth_paths(curves: list[ZeroCurve], pair: Eigenpair, states, maturities=(20.0, 30.0),
                 require_tenor: float = 30.0) -> dict[str, tuple[list[date], np.ndarray]]:
    """Cumulative wealth of quarterly roll strategies and the long bond."""
    dates, rf, rets = realized_returns(curves, maturities, pair, states, require_tenor)
    out = {}
    for key, r in rets.items():
        out[_label(key)] = (dates, np.concatenate([[1.0], np.cumprod(r)]))
    return out


# Conditional forecasts -----------------------------------------------------------

@dataclass(frozen=True)
class HorizonSample:
    """Terminal states of simulated paths, with rejected paths removed."""

    tag: MeasureTag
    x0: np.ndarray
    horizon: float
    states: np.ndarray
    n_rejected: int
    n_paths: int


def _brownian(n_paths: int, n_steps: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n_steps, n_paths, 2))


def simulate_horizon(tag, params: ModelParams, pair: Eigenpair | None, x, horizon: float, n_paths: int,
                     seed: int, dt_euler: float = 1.0 / 96.0) -> HorizonSample:
    """Simulate states at ``horizon`` under the tag's measure.

    Physical and risk-neutral draws use the exact Gaussian transition driven
    by the sum of the same Brownian increments that drive the Euler scheme
    of the long forward measure, so all measures share common random numbers
    for a given seed.  Paths that leave the eigenfunction grid are rejected.

    Raises:
        RuntimeError: If more than 1% of paths are rejected.
    """
    tag = MeasureTag(tag)
    x = np.asarray(x, float)
    n_steps = max(1, int(math.ceil(horizon / dt_euler - 1e-9)))
    dt = horizon / n_steps
    dW = _brownian(n_paths, n_steps, seed)
    if tag is MeasureTag.L:
        if pair is None:
            raise ValueError("the long forward measure needs an eigenpair")
        region = pair.grid.region()
        X = np.broadcast_to(x, (n_paths, 2)).copy()
        alive = np.ones(n_paths, bool)
        sq = math.sqrt(dt)
        for k in range(n_steps):
            idx = np.flatnonzero(alive)
            Xa = X[idx]
            drift = drift_under(MeasureTag.L, params, pair, Xa)
            Xa = Xa + drift * dt + sq * dW[k, idx] @ params.Sigma.T
            inside = region.contains(Xa, tol=0.0)
            X[idx] = Xa
            alive[idx[~inside]] = False
        states = X[alive]
        rejected = int((~alive).sum())
    else:
        K, theta = (params.K_P, params.theta_P) if tag is MeasureTag.P else (params.K_Q, params.theta_Q)
        kern = ou_transition(K, theta, params.Sigma, horizon)
        Z = dW.sum(axis=0) / math.sqrt(n_steps)
        states = kern.F @ x + kern.g + Z @ psd_sqrt(kern.V).T
        rejected = 0
        if pair is not None:
            inside = pair.grid.region().contains(states, tol=0.0)
            rejected = int((~inside).sum())
            states = states[inside]
    if rejected > MAX_REJECTED_FRACTION * n_paths:
        raise RuntimeError(f"{rejected} of {n_paths} paths left the grid under {tag.value}")
    return HorizonSample(tag, x, horizon, states, rejected, n_paths)


def horizon_returns(sample: HorizonSample, surface: PriceSurface, pair: Eigenpair | None, maturities):
    """Gross returns by maturity, the risk-free return, and the long bond."""
    x = sample.x0
    h = sample.horizon
    rf = 1.0 / float(price_at(surface, h, x))
    out = {}
    for m in maturities:
        p0 = float(price_at(surface, m, x))
        remaining = m - h
        p1 = np.ones(len(sample.states)) if remaining <= 1e-12 else price_at(surface, remaining, sample.states)
        out[m] = p1 / p0
    if pair is not None:
        out[LONG_BOND] = np.exp(pair.lam * h + pair.log_pi_at(sample.states) - pair.log_pi_at(x))
    return rf, out


def _sharpe_stats(R: np.ndarray, rf: float):
    """Mean excess, volatility, Sharpe and their Monte Carlo standard errors."""
    n = len(R)
    e = R - rf
    mu = e.mean()
    d = R - R.mean()
    var = (d**2).mean()
    sd = math.sqrt(var)
    se_mu = e.std(ddof=1) / math.sqrt(n)
    se_sd = math.sqrt(max(((d**2 - var) ** 2).mean(), 0.0) / (4 * var * n)) if var > 0 else 0.0
    if sd > 0:
        infl = (e - mu) / sd - mu / (2 * sd**3) * (d**2 - var)
        sharpe, se_sharpe = mu / sd, infl.std(ddof=1) / math.sqrt(n)
    else:
        sharpe, se_sharpe = float("nan"), float("nan")
    return mu, sd, sharpe, se_mu, se_sd, se_sharpe


@dataclass(frozen=True)
class ForecastRow:
    maturity: float | str
    excess: float
    vol: float
    sharpe: float
    se_excess: float
    se_vol: float
    se_sharpe: float


@dataclass(frozen=True)
class ForecastTable:
    """Conditional excess returns, volatilities and Sharpe ratios under one measure."""

    tag: MeasureTag
    horizon: float
    rows: tuple[ForecastRow, ...]
    n_paths: int
    n_rejected: int

    def row(self, maturity) -> ForecastRow:
        for r in self.rows:
            if r.maturity == maturity:
                return r
        raise KeyError(maturity)

    def sharpe(self) -> np.ndarray:
        return np.array([r.sharpe for r in self.rows])


def conditional_forecast(tag, params: ModelParams, pair: Eigenpair, surface: PriceSurface, x,
                         horizon: float = 0.25, maturities=FORECAST_MATURITIES, n_paths: int = 100_000,
                         seed: int = 0, dt_euler: float = 1.0 / 96.0, include_long_bond: bool = True
                         ) -> ForecastTable:
    """Monte Carlo conditional moments of holding-period returns from state ``x``.

    Excess returns are gross returns less the gross risk-free return
    ``1 / P(horizon, x)``; the Sharpe ratio divides the mean excess return by
    the standard deviation of the gross return.
    """
    sample = simulate_horizon(tag, params, pair, x, horizon, n_paths, seed, dt_euler)
    rf, rets = horizon_returns(sample, surface, pair if include_long_bond else None, maturities)
    rows = []
    for key, R in rets.items():
        rows.append(ForecastRow(key, *_sharpe_stats(R, rf)))
    return ForecastTable(MeasureTag(tag), horizon, tuple(rows), n_paths, sample.n_rejected)


def forecast_along_path(tag, params, pair, surface, states, **kwargs) -> ForecastTable:
    """Average conditional statistics over a list of states (standard errors
    are averaged too, a conservative summary for positively correlated rows)."""
    tables = [conditional_forecast(tag, params, pair, surface, x, **kwargs) for x in np.asarray(states, float)]
    rows = []
    for k, base in enumerate(tables[0].rows):
        stack = np.array([[getattr(t.rows[k], f) for f in ("excess", "vol", "sharpe", "se_excess", "se_vol",
                                                           "se_sharpe")] for t in tables])
        rows.append(ForecastRow(base.maturity, *stack.mean(axis=0)))
    return ForecastTable(tables[0].tag, tables[0].horizon, tuple(rows), tables[0].n_paths,
                         sum(t.n_rejected for t in tables))


def write_forecast_csv(path, tables: list[ForecastTable], header_lines=()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        labels = [_label(r.maturity) for r in tables[0].rows]
        w.writerow(["measure", "statistic"] + labels)
        for t in tables:
            for stat in ("excess", "vol", "sharpe", "se_excess", "se_vol", "se_sharpe"):
                w.writerow([t.tag.value, stat] + [f"{getattr(r, stat):.6f}" for r in t.rows])


@dataclass(frozen=True)
class BoundEstimate:
    value: float
    se: float


def hj_bound(params: ModelParams, pair: Eigenpair, surface: PriceSurface, x, horizon: float = 0.25,
             n_paths: int = 100_000, seed: int = 0, dt_euler: float = 1.0 / 96.0) -> BoundEstimate:
    """Upper bound on conditional Sharpe ratios, ``sd_L(1/R_inf) * R_f``."""
    sample = simulate_horizon(MeasureTag.L, params, pair, x, horizon, n_paths, seed, dt_euler)
    rf, rets = horizon_returns(sample, surface, pair, ())
    inv = 1.0 / rets[LONG_BOND]
    d = inv - inv.mean()
    var = (d**2).mean()
    sd = math.sqrt(var)
    se = math.sqrt(max(((d**2 - var) ** 2).mean(), 0.0) / (4 * var * len(inv))) if var > 0 else 0.0
    return BoundEstimate(sd * rf, se * rf)


@dataclass(frozen=True)
class DominanceRow:
    maturity: float
    log_gap: float  # E[log R_inf] - E[log R]
    se_log_gap: float
    excess: float  # E[R] - R_f
    covariance_price: float  # -cov(R, 1/R_inf) * R_f
    se_pricing_gap: float

    @property
    def dominated(self) -> bool:
        return self.log_gap >= -2 * self.se_log_gap

    @property
    def pricing_ok(self) -> bool:
        return abs(self.excess - self.covariance_price) <= 2 * self.se_pricing_gap


@dataclass(frozen=True)
class DominanceReport:
    rows: tuple[DominanceRow, ...]

    @property
    def ok(self) -> bool:
        return all(r.dominated for r in self.rows)

    @property
    def pricing_ok(self) -> bool:
        return all(r.pricing_ok for r in self.rows)


def log_dominance_check(params: ModelParams, pair: Eigenpair, surface: PriceSurface, x, horizon: float = 0.25,
                        maturities=FORECAST_MATURITIES, n_paths: int = 100_000, seed: int = 0,
                        dt_euler: float = 1.0 / 96.0) -> DominanceReport:
    """Check that the long bond is growth optimal under the long forward measure
    and that only covariance with it is priced.

    The pricing gap ``E[R] - R_f + cov(R, 1/R_inf) R_f`` is zero in population
    because ``E_L[1/R_inf] = 1/R_f`` and ``E_L[R/R_inf] = 1``; its standard
    error uses the influence function of the plug-in estimator.
    """
    sample = simulate_horizon(MeasureTag.L, params, pair, x, horizon, n_paths, seed, dt_euler)
    rf, rets = horizon_returns(sample, surface, pair, maturities)
    Rinf = rets[LONG_BOND]
    inv = 1.0 / Rinf
    n = len(Rinf)
    rows = []
    for m in maturities:
        R = rets[m]
        gap = np.log(Rinf) - np.log(R)
        mR, mI, mRI = R.mean(), inv.mean(), (R * inv).mean()
        cov = mRI - mR * mI
        psi = (R - mR) + rf * ((R * inv - mRI) - mI * (R - mR) - mR * (inv - mI))
        rows.append(DominanceRow(m, float(gap.mean()), float(gap.std(ddof=1) / math.sqrt(n)),
                                 float(mR - rf), float(-cov * rf), float(psi.std(ddof=1) / math.sqrt(n))))
    return DominanceReport(tuple(rows))
