import math
from datetime import date

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import solve_continuous_lyapunov

from bqg2.estimation import estimation_grid
from bqg2.kalman import (
    DAILY_STEP,
    FilterError,
    business_days,
    discretize,
    ekf_filter,
    measured_yields,
    measurement_coefficients,
    ou_transition,
    read_states_csv,
    simulate_panel,
    stationary_covariance,
    steady_state_covariance,
)
from bqg2.market_data import YieldPanel
from bqg2.pde import GridSpec, PriceSurface, solve_surface

TENORS = np.array([0.25, 1.0, 2.0, 5.0, 10.0, 30.0])


@pytest.fixture(scope="module")
def est_surface(table1):
    return solve_surface(table1, estimation_grid(), 30.0, ladder=TENORS)


@pytest.fixture(scope="module")
def synthetic(table1, est_surface):
    return simulate_panel(table1, est_surface, TENORS, 1260, 0.001, seed=11)


class TestDiscretize:
    def test_small_step_limit(self, table1):
        k = discretize(table1, 1e-9)
        np.testing.assert_allclose(k.F, np.eye(2), atol=1e-8)
        np.testing.assert_allclose(k.g, 0.0, atol=1e-8)
        np.testing.assert_allclose(k.V, 0.0, atol=1e-10)

    def test_diagonal_closed_form(self):
        a, b, s, dt = 0.7, 0.05, 0.1, 0.25
        k = ou_transition(np.diag([a, b]), np.array([0.3, -0.2]), s * np.eye(2), dt)
        np.testing.assert_allclose(np.diag(k.F), [math.exp(-a * dt), math.exp(-b * dt)], rtol=1e-13)
        np.testing.assert_allclose(np.diag(k.V), [s * s * (1 - math.exp(-2 * a * dt)) / (2 * a),
                                                  s * s * (1 - math.exp(-2 * b * dt)) / (2 * b)], rtol=1e-12)
        assert k.V[0, 1] == pytest.approx(0.0, abs=1e-16)
        np.testing.assert_allclose(k.g, (1 - np.diag(k.F)) * [0.3, -0.2], rtol=1e-13)

    def test_accumulates_to_lyapunov(self, table1):
        k = discretize(table1, 1.0)
        V = np.zeros((2, 2))
        for _ in range(2000):
            V = k.F @ V @ k.F.T + k.V
        target = solve_continuous_lyapunov(table1.K_P, table1.Sigma @ table1.Sigma.T)
        np.testing.assert_allclose(V, target, atol=1e-10)
        np.testing.assert_allclose(stationary_covariance(table1), target, atol=1e-12)

    def test_rejects_nonpositive_step(self, table1):
        with pytest.raises(ValueError):
            discretize(table1, 0.0)


def _linear_surface(loadings: np.ndarray, tenors) -> PriceSurface:
    """Surface whose yields are exactly ``loadings[k] @ x`` at tenor k."""
    grid = GridSpec(n1=61, n2=61, dt=1 / 24)
    mesh = grid.mesh()
    values = np.stack([np.exp(-t * (mesh @ c)) for t, c in zip(tenors, loadings)])
    return PriceSurface(grid, np.asarray(tenors, float), values, np.zeros((61, 61)))


class TestMeasurementMap:
    def test_linear_exact(self):
        loadings = np.array([[0.05, 0.01], [0.02, 0.04]])
        s = _linear_surface(loadings, [1.0, 5.0])
        coef = measurement_coefficients(s, [1.0, 5.0])
        x = np.array([[0.013, 0.77], [-0.5, -0.7], [0.44, 1.84]])
        np.testing.assert_allclose(measured_yields(coef, s.grid, x), x @ loadings.T, atol=1e-8)

    def test_outside_rejected(self, est_surface):
        coef = measurement_coefficients(est_surface, TENORS)
        with pytest.raises(ValueError, match="outside"):
            measured_yields(coef, est_surface.grid, [0.0, 3.0])


class TestFilter:
    def test_exact_linear_recovery(self, table1):
        loadings = np.array([[0.05, 0.01], [0.02, 0.04]])
        tenors = [1.0, 5.0]
        s = _linear_surface(loadings, tenors)
        rng = np.random.default_rng(3)
        states = np.cumsum(0.005 * rng.standard_normal((20, 2)), axis=0) + [0.0, 0.5]
        panel = YieldPanel(business_days(date(2001, 1, 1), 20), np.array(tenors), states @ loadings.T)
        out = ekf_filter(table1, panel, s, meas_sd=0.0)
        np.testing.assert_allclose(out.states[1:], states[1:], atol=1e-7)

    def test_tracks_simulated_states(self, table1, est_surface, synthetic):
        panel, states = synthetic
        out = ekf_filter(table1, panel, est_surface, 0.001)
        coef = measurement_coefficients(est_surface, TENORS)
        h = 1e-5
        x = table1.theta_P
        H = np.column_stack([(measured_yields(coef, est_surface.grid, x + h * e)
                              - measured_yields(coef, est_surface.grid, x - h * e)) / (2 * h) for e in np.eye(2)])
        bound = np.sqrt(np.diag(steady_state_covariance(table1, H, 1e-6 * np.eye(len(TENORS)))))
        rmse = np.sqrt(((out.states[20:] - states[20:]) ** 2).mean(axis=0))
        assert np.all(rmse < 2 * bound)

    def test_covariances_psd(self, table1, est_surface, synthetic):
        out = ekf_filter(table1, synthetic[0], est_surface, 0.001)
        assert np.all(np.linalg.eigvalsh(out.covariances) >= -1e-15)
        np.testing.assert_array_equal(out.covariances, np.swapaxes(out.covariances, 1, 2))

    @settings(max_examples=15, deadline=None)
    @given(st.floats(2e-4, 5e-3), st.integers(0, 2**31 - 1))
    def test_covariances_psd_random_noise(self, table1, est_surface, sd, seed):
        panel, _ = simulate_panel(table1, est_surface, TENORS, 60, sd, seed=seed)
        out = ekf_filter(table1, panel, est_surface, sd)
        assert np.all(np.linalg.eigvalsh(out.covariances) >= -1e-15)

    def test_missing_tenor_dropped(self, table1, est_surface, synthetic):
        panel = synthetic[0].head(5)
        gappy = panel.yields.copy()
        gappy[0, -1] = np.nan
        out = ekf_filter(table1, YieldPanel(panel.dates, panel.tenors, gappy), est_surface, 0.001)
        reduced = YieldPanel(panel.dates[:1], panel.tenors[:-1], panel.yields[:1, :-1])
        ref = ekf_filter(table1, reduced, est_surface, 0.001)
        assert out.loglik_t[0] == pytest.approx(ref.loglik_t[0], rel=1e-12)
        np.testing.assert_allclose(out.states[0], ref.states[0], rtol=1e-12)

    def test_all_missing_date_contributes_nothing(self, table1, est_surface, synthetic):
        panel = synthetic[0].head(5)
        gappy = panel.yields.copy()
        gappy[2] = np.nan
        out = ekf_filter(table1, YieldPanel(panel.dates, panel.tenors, gappy), est_surface, 0.001)
        assert out.loglik_t[2] == 0.0
        assert out.loglik == pytest.approx(out.loglik_t.sum(), rel=1e-14)

    def test_units_change_by_jacobian_constant(self, table1, est_surface, synthetic):
        panel = synthetic[0].head(200)
        dec = ekf_filter(table1, panel, est_surface, 0.001)
        bp = ekf_filter(table1, panel, est_surface, 10.0, yield_scale=1e4)
        n_obs = np.isfinite(panel.yields).sum()
        assert bp.loglik == pytest.approx(dec.loglik - n_obs * math.log(1e4), rel=1e-10)
        np.testing.assert_allclose(bp.states, dec.states, atol=1e-10)

    def test_escape_reported_with_date(self, table1, est_surface, synthetic):
        panel = synthetic[0].head(30)
        wild = np.full_like(panel.yields, 0.45)
        with pytest.raises(FilterError, match=r"\d{4}-\d{2}-\d{2}"):
            ekf_filter(table1, YieldPanel(panel.dates, panel.tenors, wild), est_surface, 1e-4)

    def test_states_csv_round_trip(self, table1, est_surface, synthetic, tmp_path):
        out = ekf_filter(table1, synthetic[0].head(10), est_surface, 0.001)
        path = tmp_path / "states.csv"
        out.write_states_csv(path, table1, ["cfg"])
        dates, states = read_states_csv(path)
        assert dates == list(out.dates)
        np.testing.assert_allclose(states, out.states, rtol=1e-9)
        assert path.read_text().splitlines()[1] == "date,x1,x2,shadow_rate"


def test_simulated_panel_seeded(table1, est_surface):
    a, sa = simulate_panel(table1, est_surface, TENORS, 50, 0.001, seed=5)
    b, sb = simulate_panel(table1, est_surface, TENORS, 50, 0.001, seed=5)
    np.testing.assert_array_equal(a.yields, b.yields)
    assert a.dates[0] == date(2000, 1, 3) and all(d.weekday() < 5 for d in a.dates)
    assert DAILY_STEP == 1 / 252
