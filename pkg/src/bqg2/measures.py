"""Market prices of risk and drifts under the physical, risk-neutral and
long forward measures, plus tests of a degenerate martingale component."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from bqg2.eigenpair import Eigenpair, ExpQuadFit
from bqg2.model import SIGMA_SCALE, ModelParams
from bqg2.pde import OMEGA, Region, bilinear


class MeasureTag(enum.Enum):
    P = "P"
    Q = "Q"
    L = "L"


def lambda_P(params: ModelParams, x) -> np.ndarray:
    """Affine physical market price of risk ``lambda0_P + Lambda_P x``."""
    x = np.asarray(x, float)
    return params.lambda0_P + np.einsum("ij,...j->...i", params.Lambda_P, x)


def log_pi_gradient(pair: Eigenpair) -> np.ndarray:
    """Gradient of ``log pi`` on every node, shape ``(n1, n2, 2)``.

    Fourth-order central differences wherever two neighbours exist on both
    sides, second-order one node in from an edge, one-sided on the edge.
    """
    f = pair.log_pi
    out = np.empty(f.shape + (2,))
    for axis, h in ((0, pair.grid.h1), (1, pair.grid.h2)):
        g = np.gradient(f, h, axis=axis, edge_order=2)
        core = [slice(None)] * 2
        core[axis] = slice(2, -2)

        def shifted(k):
            s = [slice(None)] * 2
            n = f.shape[axis]
            s[axis] = slice(2 + k, n - 2 + k)
            return f[tuple(s)]

        g[tuple(core)] = (shifted(-2) - 8 * shifted(-1) + 8 * shifted(1) - shifted(2)) / (12 * h)
        out[..., axis] = g
    return out


def _gradient_cached(pair: Eigenpair) -> np.ndarray:
    cached = getattr(pair, "_gradient", None)
    if cached is None:
        cached = log_pi_gradient(pair)
        object.__setattr__(pair, "_gradient", cached)
    return cached


def lambda_L_field(pair: Eigenpair, x, sigma: np.ndarray | None = None) -> np.ndarray:
    """``Sigma' grad log pi`` interpolated anywhere on the pricing grid."""
    sigma = SIGMA_SCALE * np.eye(2) if sigma is None else sigma
    grad = _gradient_cached(pair)
    g = np.stack([bilinear(pair.grid, grad[..., 0], x), bilinear(pair.grid, grad[..., 1], x)], axis=-1)
    return np.einsum("ji,...j->...i", sigma, g)


def lambda_L(pair: Eigenpair, x, fit: ExpQuadFit | None = None, sigma: np.ndarray | None = None,
             strict: bool = True) -> np.ndarray:
    """Market price of risk of the long bond, ``Sigma' grad log pi(x)``.

    Args:
        pair: Eigenpair on a grid.
        x: State(s), shape ``(..., 2)``.
        fit: When given, differentiate the exponential-quadratic fit instead.
        sigma: Volatility loading, ``0.1 I`` by default.
        strict: Reject states within one grid cell of the analytics region's
            boundary, where central differences would reach outside it.

    Raises:
        ValueError: For states too close to or outside the region.
    """
    sigma = SIGMA_SCALE * np.eye(2) if sigma is None else sigma
    x = np.asarray(x, float)
    if fit is not None:
        return np.einsum("ji,...j->...i", sigma, fit.gradient(x))
    if strict:
        g, d = pair.grid, pair.domain
        inner = Region((d.x1[0] + g.h1, d.x1[1] - g.h1), (d.x2[0] + g.h2, d.x2[1] - g.h2))
        if not np.all(inner.contains(x, tol=1e-12)):
            raise ValueError("state within one grid cell of the analytics boundary; gradient not supported")
    return lambda_L_field(pair, x, sigma)


def drift_under(tag: MeasureTag, params: ModelParams, pair: Eigenpair | None, x) -> np.ndarray:
    """State drift under the physical, risk-neutral or long forward measure."""
    x = np.asarray(x, float)
    tag = MeasureTag(tag)
    if tag is MeasureTag.P:
        return np.einsum("ij,...j->...i", params.K_P, params.theta_P - x)
    b_q = np.einsum("ij,...j->...i", params.K_Q, params.theta_Q - x)
    if tag is MeasureTag.Q:
        return b_q
    if pair is None:
        raise ValueError("the long forward drift needs an eigenpair")
    return b_q + np.einsum("ij,...j->...i", params.Sigma, lambda_L_field(pair, x, params.Sigma))


def affine_fit(x: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Least-squares ``values ~ intercept + slope @ x``; returns the max residual too."""
    design = np.column_stack([np.ones(len(x)), x])
    coef, *_ = np.linalg.lstsq(design, values, rcond=None)
    resid = float(np.abs(design @ coef - values).max())
    return coef[0], coef[1:].T, resid


def lambda_L_affine(pair: Eigenpair, domain: Region | None = None, sigma=None):
    """Affine approximation of the long-bond price of risk over region nodes.

    Returns:
        ``(intercept, slope, max_residual)``.
    """
    domain = domain or pair.domain
    mesh = pair.grid.mesh()
    x = mesh[pair.grid.mask(domain)]
    lam = lambda_L_field(pair, x, sigma)
    return affine_fit(x, lam)


FREE_COMPONENTS = ("v1", "v2", "v11", "v21", "v22")


@dataclass(frozen=True)
class MartingaleVol:
    """Affine approximation ``v(x) ~ v0 + V1 x`` of the martingale volatility.

    ``se`` holds standard errors of the free components ``(v1, v2, v11, v21,
    v22)``, or is ``None`` when none were supplied.
    """

    v0: np.ndarray
    V1: np.ndarray
    se: np.ndarray | None
    max_fit_residual: float

    @property
    def estimates(self) -> np.ndarray:
        return np.array([self.v0[0], self.v0[1], self.V1[0, 0], self.V1[1, 0], self.V1[1, 1]])

    def __call__(self, x) -> np.ndarray:
        return self.v0 + np.einsum("ij,...j->...i", self.V1, np.asarray(x, float))


def mpr_standard_errors(se: dict) -> np.ndarray:
    """Pick the five free-component errors from a parameter error table."""
    return np.array([se["lambda0_P"][0], se["lambda0_P"][1], se["Lambda_P"][0][0],
                     se["Lambda_P"][1][0], se["Lambda_P"][1][1]], float)


def martingale_vol(params: ModelParams, pair: Eigenpair, domain: Region | None = None,
                   mpr_se: dict | np.ndarray | None = None) -> MartingaleVol:
    """Pointwise ``lambda_P - lambda_L`` over region nodes with an affine fit.

    Standard errors are taken from the physical market price of risk, treating
    the risk-neutral block (hence ``lambda_L``) as known.
    """
    domain = domain or pair.domain
    x = pair.grid.mesh()[pair.grid.mask(domain)]
    v = lambda_P(params, x) - lambda_L_field(pair, x, params.Sigma)
    v0, V1, resid = affine_fit(x, v)
    se = None
    if mpr_se is not None:
        se = mpr_standard_errors(mpr_se) if isinstance(mpr_se, dict) else np.asarray(mpr_se, float)
    return MartingaleVol(v0, V1, se, resid)


@dataclass(frozen=True)
class VZeroTest:
    names: tuple[str, ...]
    estimates: np.ndarray
    se: np.ndarray
    p_values: np.ndarray

    @property
    def max_p(self) -> float:
        return float(self.p_values.max())

    def statement(self, level: float = 0.01) -> str:
        if self.max_p < level:
            return f"all five components differ from zero at the {level:g} level (largest p-value {self.max_p:.4f})"
        keep = [n for n, p in zip(self.names, self.p_values) if p >= level]
        return f"cannot reject zero at the {level:g} level for: {', '.join(keep)}"


def test_v_zero(mv: MartingaleVol) -> VZeroTest:
    """Two-sided Gaussian p-values for each free component being zero.

    Raises:
        ValueError: If ``mv`` carries no standard errors.
    """
    if mv.se is None:
        raise ValueError("martingale volatility has no standard errors")
    est = mv.estimates
    z = np.abs(est) / mv.se
    p = 2.0 * norm.sf(z)
    return VZeroTest(FREE_COMPONENTS, est, mv.se, p)


test_v_zero.__test__ = False  # not a pytest test despite the name


def write_measure_report(path, lam_intercept, lam_slope, mv: MartingaleVol, test: VZeroTest | None,
                         header_lines=()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["quantity", "component", "estimate", "std_error", "p_value"])
        for i in range(2):
            w.writerow(["lambda_L_intercept", f"{i + 1}", f"{lam_intercept[i]:.6f}", "", ""])
        for i in range(2):
            for j in range(2):
                w.writerow(["lambda_L_slope", f"{i + 1}{j + 1}", f"{lam_slope[i, j]:.6f}", "", ""])
        for k, name in enumerate(FREE_COMPONENTS):
            se = "" if mv.se is None else f"{mv.se[k]:.6f}"
            pv = "" if test is None else f"{test.p_values[k]:.4f}"
            w.writerow(["v", name, f"{mv.estimates[k]:.6f}", se, pv])
        w.writerow(["v", "v12", f"{mv.V1[0, 1]:.6f}", "", ""])
