import numpy as np
import pytest

from bqg2.liftoff import (
    PassageDistribution,
    simulate_liftoff,
    summarize,
    write_histogram_csv,
    write_summary_csv,
)
from bqg2.measures import MeasureTag
from conftest import constant_rate_params

ZIRP = np.array([0.0, 0.0])


def dist_from(times, censored=None, cap=15.0):
    times = np.asarray(times, float)
    censored = np.zeros(len(times), bool) if censored is None else np.asarray(censored)
    return PassageDistribution(MeasureTag.P, times, censored, len(times), 0, 1 / 252, cap, 0.0025)


class TestSimulate:
    def test_seed_deterministic(self, table1):
        a = simulate_liftoff("P", table1, None, ZIRP, n_paths=3000, seed=9, batch_size=1000)
        b = simulate_liftoff("P", table1, None, ZIRP, n_paths=3000, seed=9, batch_size=1000)
        np.testing.assert_array_equal(a.times, b.times)
        np.testing.assert_array_equal(a.censored, b.censored)

    def test_workers_do_not_change_result(self, table1, table1_pair):
        a = simulate_liftoff("L", table1, table1_pair, ZIRP, n_paths=3000, seed=2, batch_size=1000)
        b = simulate_liftoff("L", table1, table1_pair, ZIRP, n_paths=3000, seed=2, batch_size=1000, workers=3)
        np.testing.assert_array_equal(a.times, b.times)

    def test_degenerate_never_lifts(self):
        p = constant_rate_params(0.001)  # rate pinned below the threshold everywhere
        d = simulate_liftoff("Q", p, None, ZIRP, horizon_cap=2.0, n_paths=500, seed=0)
        assert d.censored.all() and np.all(d.times == 2.0)
        assert d.censored_fraction == 1.0 and len(d.uncensored) == 0

    def test_higher_threshold_is_later(self, table1):
        low = simulate_liftoff("P", table1, None, ZIRP, n_paths=2000, seed=3, threshold=0.0025)
        high = simulate_liftoff("P", table1, None, ZIRP, n_paths=2000, seed=3, threshold=0.01)
        assert np.all(high.times >= low.times)
        assert np.all(low.times >= 0)

    def test_times_on_step_grid(self, table1):
        d = simulate_liftoff("Q", table1, None, ZIRP, n_paths=500, seed=1, dt=1 / 52)
        k = d.uncensored * 52
        np.testing.assert_allclose(k, np.round(k), atol=1e-9)

    def test_already_lifted(self, table1):
        with pytest.raises(ValueError, match="already"):
            simulate_liftoff("P", table1, None, [0.2, 1.0], n_paths=10)

    def test_zero_threshold_precondition(self, table1):
        with pytest.raises(ValueError, match="already"):
            simulate_liftoff("P", table1, None, [0.1, 0.5], n_paths=10, threshold=0.0)

    def test_outside_region(self, table1):
        with pytest.raises(ValueError, match="outside"):
            simulate_liftoff("P", table1, None, [0.0, 1.5], n_paths=10)

    def test_long_forward_needs_pair(self, table1):
        with pytest.raises(ValueError, match="eigenpair"):
            simulate_liftoff("L", table1, None, ZIRP, n_paths=10)

    def test_physical_tail_heavier(self, table1, table1_pair):
        p = summarize(simulate_liftoff("P", table1, None, ZIRP, n_paths=20_000, seed=11), min_uncensored=1000)
        lf = summarize(simulate_liftoff("L", table1, table1_pair, ZIRP, n_paths=20_000, seed=11),
                       min_uncensored=1000)
        assert p.tails[3.0] > lf.tails[3.0]
        assert p.median > lf.median


class TestSummarize:
    def test_constant(self):
        s = summarize(dist_from(np.ones(20)), min_uncensored=1)
        assert s.median == 1.0 and s.mean == 1.0 and s.median_se == 0.0

    def test_uniform_grid(self):
        s = summarize(dist_from(np.arange(1, 11) / 10), min_uncensored=1)
        assert s.median == pytest.approx(0.55) and s.mean == pytest.approx(0.55)

    def test_censored_mass_kept_out_of_mean(self):
        s = summarize(dist_from([1.0, 2.0, 15.0], [False, False, True]), min_uncensored=1)
        assert s.mean == 1.5 and s.censored_fraction == pytest.approx(1 / 3) and s.median == 2.0
        assert s.tails[3.0] == pytest.approx(1 / 3)

    def test_mostly_censored_median_infinite(self):
        s = summarize(dist_from([1.0, 15.0, 15.0], [False, True, True]), min_uncensored=1)
        assert s.median == np.inf

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            summarize(dist_from([]))

    def test_too_few_uncensored(self):
        with pytest.raises(ValueError, match="uncensored"):
            summarize(dist_from(np.ones(5)))


def test_csv_outputs(tmp_path):
    d = dist_from([0.1, 0.3, 15.0], [False, False, True])
    hist = tmp_path / "h.csv"
    write_histogram_csv(hist, [d], bin_width=5.0, header_lines=["cfg"])
    assert hist.read_text().splitlines()[2:] == ["P,0,5,2", "P,5,10,0", "P,10,15,0", "P,15,inf,1"]
    summ = tmp_path / "s.csv"
    write_summary_csv(summ, [summarize(d, min_uncensored=1)])
    assert summ.read_text().splitlines()[0].startswith("measure,median,median_se,mean_uncensored")
