import math
from datetime import date

import numpy as np
import pytest

from bqg2.eigenpair import long_bond_path
from bqg2.market_data import ZeroCurve, year_fraction
from bqg2.risk import (
    LONG_BOND,
    InsufficientSampleError,
    conditional_forecast,
    duration_matched_table,
    hj_bound,
    log_dominance_check,
    realized_table,
    simulate_horizon,
    wealth_paths,
    write_forecast_csv,
)

TENORS = np.array([0.25, 1.0, 2.0, 5.0, 10.0, 20.0, 30.0])
DATES = [date(2001, 1, 2), date(2001, 4, 2), date(2001, 7, 2)]
STATES = np.array([[0.0, 0.3], [0.05, 0.5], [-0.05, 0.4]])


def flat(day, rate):
    return ZeroCurve(day, TENORS.copy(), np.full(len(TENORS), rate))


def toy_curves():
    return [flat(d, r) for d, r in zip(DATES, (0.03, 0.04, 0.02))]


class TestRealized:
    def test_hand_computed(self):
        curves = toy_curves()
        rates = (0.03, 0.04, 0.02)
        table = realized_table(curves, maturities=(1.0, 10.0))
        for m in (1.0, 10.0):
            excess = []
            for k in range(2):
                h = year_fraction(DATES[k], DATES[k + 1])
                R = math.exp(-rates[k + 1] * (m - h) + rates[k] * m)
                excess.append(R - math.exp(rates[k] * h))
            row = table.row(m)
            assert row.mean_excess == pytest.approx(np.mean(excess), rel=1e-12)
            assert row.sd == pytest.approx(np.std(excess, ddof=1), rel=1e-10)
            assert row.sharpe == pytest.approx(row.mean_excess / row.sd, rel=1e-12)

    def test_constant_flat_curves(self):
        curves = [flat(d, 0.03) for d in DATES]
        row = realized_table(curves, maturities=(5.0,)).row(5.0)
        assert row.mean_excess == pytest.approx(0.0, abs=1e-14)
        assert row.sharpe is None

    def test_constant_sloped_curves_roll_down(self):
        yields = 0.01 + 0.001 * TENORS
        curves = [ZeroCurve(d, TENORS.copy(), yields) for d in DATES]
        row = realized_table(curves, maturities=(10.0,)).row(10.0)
        c = curves[0]
        excess = []
        for k in range(2):
            h = year_fraction(DATES[k], DATES[k + 1])
            excess.append(float(c.discount(10.0 - h) / c.discount(10.0) - 1.0 / c.discount(h)))
        assert row.mean_excess == pytest.approx(np.mean(excess), rel=1e-10)
        assert row.mean_excess > 0

    def test_long_bond_row(self, coarse_pair):
        table = realized_table(toy_curves(), pair=coarse_pair, states=STATES, maturities=(1.0,))
        rf = [math.exp(0.03 * year_fraction(DATES[0], DATES[1])), math.exp(0.04 * year_fraction(DATES[1], DATES[2]))]
        lb = [long_bond_path(coarse_pair, DATES[k:k + 2], STATES[k:k + 2])[1] for k in range(2)]
        assert table.rows[-1].maturity == LONG_BOND
        assert table.row(LONG_BOND).mean_excess == pytest.approx(np.mean(np.subtract(lb, rf)), rel=1e-12)

    def test_requires_two_returns(self):
        with pytest.raises(InsufficientSampleError):
            realized_table(toy_curves()[:2])

    def test_quarter_gap_breaks_pairs(self):
        curves = toy_curves() + [flat(date(2002, 1, 2), 0.03)]
        assert realized_table(curves, maturities=(1.0,)).sample.endswith("2 quarters")

    def test_short_curves_excluded(self):
        short = ZeroCurve(date(2001, 7, 2), TENORS[:-1].copy(), np.full(len(TENORS) - 1, 0.02))
        with pytest.raises(InsufficientSampleError):
            realized_table(toy_curves()[:2] + [short])

    def test_csv(self, tmp_path):
        path = tmp_path / "t.csv"
        realized_table(toy_curves(), maturities=(1.0, 10.0)).write_csv(path, ["cfg"])
        lines = path.read_text().splitlines()
        assert lines[0] == "# cfg" and lines[2] == "statistic,1y,10y" and len(lines) == 6


class TestDurationMatched:
    def test_unlevered_equals_plain_log_return(self):
        curves = toy_curves()
        t = duration_matched_table(curves, (10.0,), (10.0,))
        R = [math.exp(-0.04 * (10 - year_fraction(DATES[0], DATES[1])) + 0.3),
             math.exp(-0.02 * (10 - year_fraction(DATES[1], DATES[2])) + 0.4)]
        assert t.values[0, 0] == pytest.approx(np.mean(np.log(R)), rel=1e-12)

    def test_levered_hand_computed(self):
        curves = [flat(d, 0.03) for d in DATES]
        t = duration_matched_table(curves, (20.0,), (10.0,))
        # flat constant curves: every position earns the short rate
        expected = np.mean([0.03 * year_fraction(DATES[k], DATES[k + 1]) for k in range(2)])
        assert t.values[0, 0] == pytest.approx(expected, rel=1e-10)

    def test_levered_sloped(self):
        curves = toy_curves()
        t = duration_matched_table(curves, (20.0,), (10.0,))
        logs = []
        for k, (r0, r1) in enumerate(((0.03, 0.04), (0.04, 0.02))):
            h = year_fraction(DATES[k], DATES[k + 1])
            R = math.exp(-r1 * (10 - h) + r0 * 10)
            logs.append(math.log(2 * R - math.exp(r0 * h)))
        assert t.values[0, 0] == pytest.approx(np.mean(logs), rel=1e-12)

    def test_nonpositive_weight(self):
        with pytest.raises(ValueError):
            duration_matched_table(toy_curves(), (0.0,), (10.0,))

    def test_long_bond_column(self, coarse_pair, tmp_path):
        t = duration_matched_table(toy_curves(), (20.0,), (10.0,), pair=coarse_pair, states=STATES)
        assert t.long_bond is not None
        path = tmp_path / "d.csv"
        t.write_csv(path)
        assert path.read_text().splitlines()[1] == "duration,10y,LB"


def test_wealth_paths(coarse_pair):
    paths = wealth_paths(toy_curves(), coarse_pair, STATES, maturities=(20.0,))
    dates, wealth = paths["20y"]
    assert wealth[0] == 1.0 and len(wealth) == 3 and len(dates) == 2
    assert set(paths) == {"20y", LONG_BOND}


class TestConditional:
    X0 = np.array([0.0, 0.4])

    def test_seed_deterministic(self, table1, table1_pair):
        a = simulate_horizon("L", table1, table1_pair, self.X0, 0.25, 2000, seed=4)
        b = simulate_horizon("L", table1, table1_pair, self.X0, 0.25, 2000, seed=4)
        np.testing.assert_array_equal(a.states, b.states)

    def test_exact_transition_moments(self, table1):
        s = simulate_horizon("P", table1, None, self.X0, 1.0, 50_000, seed=1)
        from bqg2.kalman import ou_transition
        k = ou_transition(table1.K_P, table1.theta_P, table1.Sigma, 1.0)
        mean = k.F @ self.X0 + k.g
        se = np.sqrt(np.diag(k.V) / 50_000)
        assert np.all(np.abs(s.states.mean(axis=0) - mean) < 4 * se)

    def test_rejection_error(self, table1, coarse_pair):
        with pytest.raises(RuntimeError, match="left the grid"):
            simulate_horizon("Q", table1, coarse_pair, [0.44, 1.84], 1.0, 2000, seed=0)

    def test_long_forward_needs_pair(self, table1):
        with pytest.raises(ValueError):
            simulate_horizon("L", table1, None, self.X0, 0.25, 10, seed=0)

    def test_hj_bound(self, table1, table1_pair, table1_surface):
        bound = hj_bound(table1, table1_pair, table1_surface, self.X0, n_paths=20_000, seed=2)
        table = conditional_forecast("L", table1, table1_pair, table1_surface, self.X0, n_paths=20_000, seed=3)
        for r in table.rows:
            assert r.sharpe <= bound.value + 2 * (bound.se + r.se_sharpe)

    def test_long_bond_dominance(self, table1, table1_pair, table1_surface):
        report = log_dominance_check(table1, table1_pair, table1_surface, self.X0, n_paths=20_000, seed=5)
        assert report.ok
        assert report.pricing_ok

    def test_forecast_csv(self, table1, table1_pair, table1_surface, tmp_path):
        tables = [conditional_forecast(tag, table1, table1_pair, table1_surface, self.X0, n_paths=2000, seed=1)
                  for tag in ("P", "L")]
        path = tmp_path / "f.csv"
        write_forecast_csv(path, tables, ["cfg"])
        lines = path.read_text().splitlines()
        assert lines[1] == "measure,statistic,1y,2y,3y,5y,10y,20y,30y,LB" and len(lines) == 2 + 12
