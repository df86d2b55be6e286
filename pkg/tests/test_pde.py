import numpy as np
import pytest

from bqg2.kalman import ou_transition
from bqg2.pde import (
    OMEGA,
    GridSpec,
    PdeSolver,
    PriceSurface,
    Region,
    default_ladder,
    price_at,
    riccati_oracle,
    solve_riccati,
    solve_surface,
    yield_at,
)
from conftest import COARSE, constant_rate_params

LADDER = [1.0, 5.0, 10.0, 20.0, 30.0]


@pytest.fixture(scope="module")
def unfloored(table1):
    return solve_surface(table1, COARSE, 30.0, ladder=LADDER, floor=False)


@pytest.fixture(scope="module")
def floored(table1):
    return solve_surface(table1, COARSE, 30.0, ladder=LADDER)


class TestGridSpec:
    def test_minimum_nodes(self):
        with pytest.raises(ValueError, match="51"):
            GridSpec(n1=50)

    def test_time_step_cap(self):
        with pytest.raises(ValueError, match="time step"):
            GridSpec(dt=0.06)

    def test_must_cover_region(self):
        with pytest.raises(ValueError, match="contain"):
            GridSpec(x1_range=(-0.2, 0.2))

    def test_refined_nests_nodes(self):
        fine = COARSE.refined()
        np.testing.assert_allclose(fine.x1[::2], COARSE.x1)
        assert fine.dt == COARSE.dt / 2

    def test_ladder(self):
        ladder = default_ladder(45.0)
        assert ladder[0] == pytest.approx(1 / 12) and 2.25 in ladder and 45.0 in ladder and 40.5 not in ladder


class TestDegenerateRates:
    def test_zero_rate(self):
        s = solve_surface(constant_rate_params(0.0), COARSE, 5.0, ladder=[1.0, 5.0])
        np.testing.assert_allclose(s.values, 1.0, atol=1e-12)

    def test_constant_rate(self):
        c = 0.03
        s = solve_surface(constant_rate_params(c), COARSE, 10.0, ladder=[0.5, 10.0])
        np.testing.assert_allclose(s.values[1], np.exp(-c * 10.0), atol=1e-8)
        x = np.array([[0.013, 0.77], [-0.54, 1.8]])
        np.testing.assert_allclose(yield_at(s, 3.7, x), c, atol=1e-10)


class TestRiccati:
    def test_initial_condition(self, table1):
        assert riccati_oracle(table1, 0.0, [0.1, 0.5]) == 1.0

    def test_constant_rate_coefficients(self):
        c = 0.02
        C, b, a = solve_riccati(constant_rate_params(c), 7.0).coefficients(7.0)
        np.testing.assert_allclose(C, 0.0, atol=1e-14)
        np.testing.assert_allclose(b, 0.0, atol=1e-14)
        assert a == pytest.approx(c * 7.0, rel=1e-10)

    @pytest.mark.slow
    def test_monte_carlo_oracle(self, table1):
        tau, dt, n = 5.0, 1 / 100, 1_000_000
        kernel = ou_transition(table1.K_Q, table1.theta_Q, table1.Sigma, dt)
        L = np.linalg.cholesky(kernel.V)
        phi, rho = table1.phi, table1.rho
        rng = np.random.default_rng(7)
        discounts = []
        for _ in range(4):
            x = np.tile([0.1, 0.5], (n // 4, 1))
            r = rho + np.einsum("ni,ij,nj->n", x, phi, x)
            integral = 0.5 * r
            for k in range(int(round(tau / dt))):
                x = kernel.g + x @ kernel.F.T + rng.standard_normal(x.shape) @ L.T
                r = rho + np.einsum("ni,ij,nj->n", x, phi, x)
                integral += r
            integral -= 0.5 * r
            discounts.append(np.exp(-dt * integral))
        d = np.concatenate(discounts)
        mc, se = d.mean(), d.std(ddof=1) / np.sqrt(len(d))
        assert abs(riccati_oracle(table1, tau, [0.1, 0.5]) - mc) < 3 * se


class TestSurface:
    def test_matches_riccati_on_region(self, table1, unfloored):
        sol = solve_riccati(table1, 30.0)
        mask = COARSE.mask()
        x = COARSE.mesh()[mask]
        for tau in LADDER:
            exact = -sol.log_price(tau, x) / tau
            assert np.abs(unfloored.yield_grid(tau)[mask] - exact).max() < 1e-4

    def test_mid_cell_query(self, table1, unfloored):
        x = COARSE.mesh()[:-1, :-1] + 0.5 * np.array([COARSE.h1, COARSE.h2])
        x = x[OMEGA.contains(x)]
        exact = -solve_riccati(table1, 10.0).log_price(10.0, x) / 10.0
        assert np.abs(yield_at(unfloored, 10.0, x) - exact).max() < 1e-4

    def test_node_query_exact(self, floored):
        i, j = 37, 58
        x = COARSE.mesh()[i, j]
        assert price_at(floored, 5.0, x) == pytest.approx(floored.values[1, i, j], rel=1e-13)

    def test_outside_grid_names_coordinate(self, floored):
        with pytest.raises(ValueError, match="x2=2.5"):
            yield_at(floored, 5.0, [0.0, 2.5])

    def test_price_bounds(self, floored):
        assert floored.values.min() > 0 and floored.values.max() <= 1.0 + 1e-12

    def test_floor_lowers_prices(self, floored, unfloored):
        mask = COARSE.mask()
        assert np.all(floored.values[:, mask] <= unfloored.values[:, mask] + 1e-12)

    def test_higher_rho_lowers_prices(self, table1, floored):
        bumped = solve_surface(table1.replace(rho=table1.rho + 0.001), COARSE, 30.0, ladder=LADDER)
        assert np.all(bumped.values < floored.values)

    def test_decreasing_in_maturity_when_rate_positive(self, table1):
        s = solve_surface(table1.replace(rho=0.005), COARSE, 10.0, ladder=[0.5, 1.0, 2.0, 5.0, 10.0])
        assert np.all(np.diff(s.values, axis=0) < 0)

    def test_zero_maturity_anchor(self, floored):
        np.testing.assert_allclose(floored.yield_grid(1e-9), floored.short_rate, atol=1e-9 * 1e3)

    def test_grid_refinement(self, floored, table1_surface):
        mask = COARSE.mask()
        fine = table1_surface.yield_grid(30.0)[::2, ::2]
        assert np.abs(fine[mask] - floored.yield_grid(30.0)[mask]).max() < 0.5e-4

    def test_csv_dump(self, tmp_path):
        s = solve_surface(constant_rate_params(0.01), COARSE, 1.0, ladder=[1.0])
        path = tmp_path / "surface.csv"
        s.to_csv(path, header_lines=["cfg"])
        lines = path.read_text().splitlines()
        assert lines[0] == "# cfg" and lines[1] == "tau,x1,x2,price" and len(lines) == 2 + 101 * 101

    def test_ladder_off_step_rejected(self, table1):
        with pytest.raises(ValueError, match="multiple"):
            PdeSolver(table1, COARSE, record=[0.01])

    def test_surface_shape_checked(self):
        with pytest.raises(ValueError, match="ladder"):
            PriceSurface(COARSE, np.array([1.0]), np.ones((2, 101, 101)), np.zeros((101, 101)))
