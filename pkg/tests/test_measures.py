import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bqg2.eigenpair import extract, fit_exp_quadratic
from bqg2.measures import (
    MartingaleVol,
    MeasureTag,
    drift_under,
    lambda_L,
    lambda_L_affine,
    lambda_P,
    martingale_vol,
    mpr_standard_errors,
    test_v_zero,
    write_measure_report,
)
from bqg2.model import table1_standard_errors
from bqg2.pde import PdeSolver
from conftest import COARSE, constant_rate_params

states = st.tuples(st.floats(-0.25, 0.15), st.floats(-0.05, 1.15)).map(np.array)


class TestLambdaP:
    def test_table1_origin(self, table1):
        np.testing.assert_allclose(lambda_P(table1, [0.0, 0.0]), [-0.8929, -0.9589], atol=1e-12)

    def test_table1_point(self, table1):
        # quoted with Lambda_12 = 0.4152; the identification restriction pins 0.415
        np.testing.assert_allclose(lambda_P(table1, [0.1, 0.5]), [-1.0182, -0.3369], atol=1.5e-4)

    def test_constant_without_slope(self, table1):
        K_Q = table1.K_Q.copy()
        K_Q[0, 1] = 0.0  # Lambda_12 is tied to K_Q_12
        p = table1.replace(K_Q=K_Q, Lambda_P=np.zeros((2, 2)))
        np.testing.assert_allclose(lambda_P(p, [[0.1, 0.3], [-0.2, 1.0]]), np.tile(p.lambda0_P, (2, 1)))


class TestLambdaL:
    def test_constant_rate_is_zero(self):
        pair = extract(PdeSolver(constant_rate_params(0.02), COARSE))
        np.testing.assert_allclose(lambda_L(pair, [[0.0, 0.0], [0.1, 0.9]]), 0.0, atol=1e-9)

    def test_table1_origin(self, table1_pair):
        np.testing.assert_allclose(lambda_L(table1_pair, [0.0, 0.0]), [0.162, -0.096], atol=0.02)

    def test_fit_gradient_close_to_grid(self, table1_pair):
        fit = fit_exp_quadratic(table1_pair)
        np.testing.assert_allclose(lambda_L(table1_pair, [0.0, 0.0], fit=fit),
                                   lambda_L(table1_pair, [0.0, 0.0]), atol=0.005)

    def test_boundary_rejected(self, coarse_pair):
        with pytest.raises(ValueError, match="boundary"):
            lambda_L(coarse_pair, [-0.3, 0.5])

    def test_affine_approximation(self, table1_pair):
        intercept, _slope, resid = lambda_L_affine(table1_pair)
        np.testing.assert_allclose(intercept, [0.162, -0.096], atol=0.02)
        assert resid < 0.05

    def test_scale_invariant(self, coarse_pair):
        x = np.array([[0.0, 0.0], [0.1, 0.9], [-0.2, 0.2]])
        np.testing.assert_allclose(lambda_L(coarse_pair.rescaled(42.0), x), lambda_L(coarse_pair, x), atol=1e-12)


class TestDrifts:
    @settings(max_examples=100, deadline=None)
    @given(states)
    def test_physical_minus_risk_neutral(self, table1, x):
        diff = drift_under(MeasureTag.P, table1, None, x) - drift_under(MeasureTag.Q, table1, None, x)
        np.testing.assert_allclose(diff, table1.Sigma @ lambda_P(table1, x), atol=1e-10)

    @settings(max_examples=100, deadline=None)
    @given(states)
    def test_long_forward_minus_risk_neutral(self, table1, coarse_pair, x):
        diff = drift_under("L", table1, coarse_pair, x) - drift_under("Q", table1, coarse_pair, x)
        np.testing.assert_allclose(diff, table1.Sigma @ lambda_L(coarse_pair, x, strict=False), atol=1e-10)

    def test_origin_shift(self, table1, table1_pair):
        shift = drift_under("L", table1, table1_pair, [0.0, 0.0]) - drift_under("Q", table1, None, [0.0, 0.0])
        np.testing.assert_allclose(shift, 0.1 * np.array([0.162, -0.096]), atol=0.002)

    def test_long_forward_needs_pair(self, table1):
        with pytest.raises(ValueError, match="eigenpair"):
            drift_under("L", table1, None, [0.0, 0.0])


class TestMartingaleVol:
    def test_table1(self, table1, table1_pair):
        mv = martingale_vol(table1, table1_pair)
        np.testing.assert_allclose(mv.v0, [-1.055, -0.863], atol=0.03)
        np.testing.assert_allclose(mv.V1, [[-2.946, 0.246], [4.045, 0.525]], atol=0.1)

    def test_degenerate_model(self, v_zero, v_zero_pair):
        mv = martingale_vol(v_zero, v_zero_pair)
        x = v_zero_pair.grid.mesh()[v_zero_pair.grid.mask()]
        assert np.abs(mv(x)).max() < 2e-4
        assert mv.max_fit_residual < 2e-4

    def test_pointwise_definition(self, table1, coarse_pair):
        mv = martingale_vol(table1, coarse_pair)
        x = np.array([[0.0, 0.2], [0.1, 0.9]])
        v = lambda_P(table1, x) - lambda_L(coarse_pair, x)
        np.testing.assert_allclose(mv(x), v, atol=mv.max_fit_residual)


class TestVZero:
    def _mv(self, est, se):
        est = np.asarray(est, float)
        V1 = np.array([[est[2], 0.0], [est[3], est[4]]])
        return MartingaleVol(est[:2], V1, np.asarray(se, float), 0.0)

    def test_zero_estimates(self):
        assert np.all(test_v_zero(self._mv(np.zeros(5), np.ones(5))).p_values == 1.0)

    def test_gaussian_quantile(self):
        p = test_v_zero(self._mv(np.full(5, 1.96), np.ones(5))).p_values
        np.testing.assert_allclose(p, 0.05, atol=5e-4)

    def test_published_inputs(self):
        se = mpr_standard_errors(table1_standard_errors())
        mv = MartingaleVol(np.array([-1.055, -0.863]), np.array([[-2.946, 0.246], [4.045, 0.525]]), se, 0.0)
        result = test_v_zero(mv)
        assert [f"{p:.4f}" for p in result.p_values] == ["0.0000", "0.0000", "0.0008", "0.0004", "0.0000"]
        assert "all five" in result.statement()

    def test_missing_errors(self):
        with pytest.raises(ValueError, match="standard errors"):
            test_v_zero(MartingaleVol(np.zeros(2), np.zeros((2, 2)), None, 0.0))

    def test_statement_names_survivors(self):
        result = test_v_zero(self._mv([5, 5, 0.1, 5, 5], np.ones(5)))
        assert result.statement().endswith("v11")


def test_report_csv(table1, coarse_pair, tmp_path):
    mv = martingale_vol(table1, coarse_pair, mpr_se=table1_standard_errors())
    a, B, _ = lambda_L_affine(coarse_pair)
    path = tmp_path / "measures.csv"
    write_measure_report(path, a, B, mv, test_v_zero(mv), ["cfg"])
    lines = path.read_text().splitlines()
    assert lines[0] == "# cfg" and lines[1] == "quantity,component,estimate,std_error,p_value"
    assert len(lines) == 2 + 2 + 4 + 5 + 1
