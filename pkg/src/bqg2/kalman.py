"""Exact discretisation of the state dynamics and an extended Kalman filter
with yields interpolated off a pricing surface."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import date

import numpy as np
from numba import njit
from scipy.linalg import expm, solve_continuous_lyapunov
from scipy.ndimage import spline_filter

from bqg2.market_data import YieldPanel
from bqg2.model import ModelParams, shadow_rate
from bqg2.pde import GridSpec, PriceSurface

DAILY_STEP = 1.0 / 252.0
JACOBIAN_BUMP = 1e-4
DEFAULT_MEAS_SD = 0.001
SPLINE_PAD = 12


@dataclass(frozen=True)
class TransitionKernel:
    """``X_{t+dt} = F X_t + g + e`` with ``e ~ N(0, V)``."""

    F: np.ndarray
    g: np.ndarray
    V: np.ndarray


def ou_transition(K: np.ndarray, theta: np.ndarray, Sigma: np.ndarray, dt: float) -> TransitionKernel:
    """Exact Gaussian transition of ``dX = K (theta - X) dt + Sigma dW`` over ``dt``.

    The covariance comes from Van Loan's block exponential, which evaluates the
    finite-horizon Lyapunov integral without quadrature.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    SS = Sigma @ Sigma.T
    block = np.zeros((4, 4))
    block[:2, :2] = -K
    block[:2, 2:] = SS
    block[2:, 2:] = K.T
    E = expm(block * dt)
    F = E[:2, :2]
    V = E[:2, 2:] @ F.T
    V = 0.5 * (V + V.T)
    g = (np.eye(2) - F) @ theta
    return TransitionKernel(F, g, V)


def discretize(params: ModelParams, dt: float) -> TransitionKernel:
    """Exact transition of the physical dynamics over ``dt``."""
    return ou_transition(params.K_P, params.theta_P, params.Sigma, dt)


def stationary_covariance(params: ModelParams) -> np.ndarray:
    """Solution of ``K V + V K' = Sigma Sigma'``."""
    V = solve_continuous_lyapunov(params.K_P, params.Sigma @ params.Sigma.T)
    return 0.5 * (V + V.T)


def psd_sqrt(V: np.ndarray) -> np.ndarray:
    """Symmetric square root tolerant of a singular covariance."""
    w, U = np.linalg.eigh(0.5 * (V + V.T))
    return U * np.sqrt(np.clip(w, 0.0, None))


# Filtering kernel -------------------------------------------------------------

# Measurement map -------------------------------------------------------------
# Yields between nodes come from a cubic B-spline interpolant of the nodal
# yields.  Unlike bilinear interpolation its Jacobian is continuous, so the
# filter likelihood is smooth in the parameters.

def spline_coefficients(nodal: np.ndarray) -> np.ndarray:
    """Cubic B-spline coefficients for nodal values of shape ``(m, n1, n2)``.

    The nodes are padded by linear extrapolation before prefiltering so that
    the interpolant stays close to linear at the grid edges.
    """
    pad = ((0, 0), (SPLINE_PAD, SPLINE_PAD), (SPLINE_PAD, SPLINE_PAD))
    ext = np.pad(np.asarray(nodal, float), pad, mode="reflect", reflect_type="odd")
    return np.stack([spline_filter(layer, order=3, mode="mirror") for layer in ext])


@njit(cache=True)
def _bspline_weights(t):
    s = 1.0 - t
    return (s * s * s / 6.0, (3.0 * t * t * t - 6.0 * t * t + 4.0) / 6.0,
            (-3.0 * t * t * t + 3.0 * t * t + 3.0 * t + 1.0) / 6.0, t * t * t / 6.0)


@njit(cache=True)
def _spline(coef, k, x1, x2, lo1, h1, n1, lo2, h2, n2):
    p = (x1 - lo1) / h1
    q = (x2 - lo2) / h2
    i = min(max(int(math.floor(p)), 0), n1 - 2)
    j = min(max(int(math.floor(q)), 0), n2 - 2)
    wa = _bspline_weights(p - i)
    wb = _bspline_weights(q - j)
    out = 0.0
    for a in range(4):
        row = i + a + SPLINE_PAD - 1  # node i - 1 + a in padded coordinates
        acc = 0.0
        for b in range(4):
            acc += wb[b] * coef[k, row, j + b + SPLINE_PAD - 1]
        out += wa[a] * acc
    return out


@njit(cache=True)
def _spline_many(coef, x, lo1, h1, n1, lo2, h2, n2):
    m = coef.shape[0]
    out = np.empty((x.shape[0], m))
    for r in range(x.shape[0]):
        for k in range(m):
            out[r, k] = _spline(coef, k, x[r, 0], x[r, 1], lo1, h1, n1, lo2, h2, n2)
    return out


def measurement_coefficients(surface: PriceSurface, tenors) -> np.ndarray:
    """Spline coefficients of the model yields at each tenor."""
    return spline_coefficients(yield_grids(surface, tenors))


def measured_yields(coef: np.ndarray, grid: GridSpec, x) -> np.ndarray:
    """Model yields at states ``x`` (shape ``(..., 2)``), one column per tenor."""
    x = np.asarray(x, float)
    flat = np.ascontiguousarray(x.reshape(-1, 2))
    lo1, hi1 = grid.x1_range
    lo2, hi2 = grid.x2_range
    if np.any((flat[:, 0] < lo1) | (flat[:, 0] > hi1) | (flat[:, 1] < lo2) | (flat[:, 1] > hi2)):
        raise ValueError("state outside the pricing grid")
    out = _spline_many(coef, flat, lo1, grid.h1, grid.n1, lo2, grid.h2, grid.n2)
    return out.reshape(x.shape[:-1] + (coef.shape[0],))


@njit(cache=True)
def _cholesky(S, k):
    L = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1):
            acc = S[i, j]
            for m in range(j):
                acc -= L[i, m] * L[j, m]
            if i == j:
                if acc <= 0.0:
                    return L, False
                L[i, i] = math.sqrt(acc)
            else:
                L[i, j] = acc / L[j, j]
    return L, True


@njit(cache=True)
def _chol_solve(L, b, k):
    z = np.empty(k)
    for i in range(k):
        acc = b[i]
        for m in range(i):
            acc -= L[i, m] * z[m]
        z[i] = acc / L[i, i]
    out = np.empty(k)
    for i in range(k - 1, -1, -1):
        acc = z[i]
        for m in range(i + 1, k):
            acc -= L[m, i] * out[m]
        out[i] = acc / L[i, i]
    return out, z


@njit(cache=True)
def _ekf(obs, coef, lo1, h1, n1, lo2, h2, n2, F, g, V, R, x0, P0, bump):
    T, m = obs.shape
    xs = np.empty((T, 2))
    Ps = np.empty((T, 2, 2))
    ll = np.zeros(T)
    fitted = np.empty((T, m))
    hi1 = lo1 + h1 * (n1 - 1)
    hi2 = lo2 + h2 * (n2 - 1)
    x = x0.copy()
    P = P0.copy()
    FT = np.ascontiguousarray(F.T)
    log2pi = math.log(2 * math.pi)
    for t in range(T):
        if t > 0:
            x = F @ x + g
            P = F @ P @ FT + V
        if (x[0] - bump < lo1 or x[0] + bump > hi1 or x[1] - bump < lo2 or x[1] + bump > hi2
                or not (np.isfinite(x[0]) and np.isfinite(x[1]))):
            return xs, Ps, ll, fitted, 2, t
        idx = np.empty(m, np.int64)
        k = 0
        for j in range(m):
            if np.isfinite(obs[t, j]):
                idx[k] = j
                k += 1
        if k > 0:
            H = np.empty((k, 2))
            v = np.empty(k)
            for a in range(k):
                j = idx[a]
                v[a] = obs[t, j] - _spline(coef, j, x[0], x[1], lo1, h1, n1, lo2, h2, n2)
                H[a, 0] = (_spline(coef, j, x[0] + bump, x[1], lo1, h1, n1, lo2, h2, n2)
                           - _spline(coef, j, x[0] - bump, x[1], lo1, h1, n1, lo2, h2, n2)) / (2 * bump)
                H[a, 1] = (_spline(coef, j, x[0], x[1] + bump, lo1, h1, n1, lo2, h2, n2)
                           - _spline(coef, j, x[0], x[1] - bump, lo1, h1, n1, lo2, h2, n2)) / (2 * bump)
            PH = P @ H.T
            S = H @ PH
            for a in range(k):
                S[a, a] += R[idx[a]]
            L, ok = _cholesky(S, k)
            if not ok:
                return xs, Ps, ll, fitted, 1, t
            w, z = _chol_solve(L, v, k)
            logdet = 0.0
            quad = 0.0
            for a in range(k):
                logdet += 2.0 * math.log(L[a, a])
                quad += z[a] * z[a]
            ll[t] = -0.5 * (k * log2pi + logdet + quad)
            # gain K = P H' S^{-1}
            G = np.empty((2, k))
            for r in range(2):
                sol, _ = _chol_solve(L, PH[r], k)
                G[r] = sol
            x = x + G @ v
            IKH = np.eye(2) - G @ H
            RG = np.empty((2, k))
            for a in range(k):
                RG[0, a] = G[0, a] * R[idx[a]]
                RG[1, a] = G[1, a] * R[idx[a]]
            P = IKH @ P @ np.ascontiguousarray(IKH.T) + RG @ np.ascontiguousarray(G.T)
            P = 0.5 * (P + P.T)
        xs[t] = x
        Ps[t] = P
        for j in range(m):
            fitted[t, j] = _spline(coef, j, x[0], x[1], lo1, h1, n1, lo2, h2, n2)
    return xs, Ps, ll, fitted, 0, -1


class FilterError(RuntimeError):
    """Filter breakdown: non-positive innovation covariance or state escape."""


@dataclass(frozen=True)
class FilterOutput:
    """Filtered moments, likelihood and fit diagnostics.

    Attributes:
        dates: Observation dates.
        states: Filtered means, shape ``(T, 2)``.
        covariances: Filtered covariances, shape ``(T, 2, 2)``.
        loglik: Total quasi log-likelihood.
        loglik_t: Per-date contributions.
        meas_error_sd: Measurement error standard deviation per tenor.
        tenors: Tenors in years.
        pricing_errors: Mean absolute fit error per tenor in basis points.
        fitted: Model yields at the filtered states.
    """

    dates: tuple
    states: np.ndarray
    covariances: np.ndarray
    loglik: float
    loglik_t: np.ndarray
    meas_error_sd: np.ndarray
    tenors: np.ndarray
    pricing_errors: np.ndarray
    fitted: np.ndarray

    def write_states_csv(self, path, params: ModelParams, header_lines=()) -> None:
        rates = shadow_rate(params, self.states)
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["date", "x1", "x2", "shadow_rate"])
            for d, (x1, x2), r in zip(self.dates, self.states, rates):
                label = d.isoformat() if isinstance(d, date) else d
                w.writerow([label, f"{x1:.10g}", f"{x2:.10g}", f"{r:.10g}"])


def read_states_csv(path) -> tuple[list[date], np.ndarray]:
    dates, states = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        next(reader)
        for rec in reader:
            dates.append(date.fromisoformat(rec[0]))
            states.append((float(rec[1]), float(rec[2])))
    return dates, np.array(states)


def yield_grids(surface: PriceSurface, tenors) -> np.ndarray:
    """Nodal yields at each tenor, shape ``(m, n1, n2)``."""
    return np.stack([surface.yield_grid(float(t)) for t in tenors])


def ekf_filter(params: ModelParams, panel: YieldPanel, surface: PriceSurface, meas_sd=DEFAULT_MEAS_SD,
               dt: float = DAILY_STEP, yield_scale: float = 1.0, coefficients: np.ndarray | None = None,
               x0=None, P0=None) -> FilterOutput:
    """Extended Kalman filter over a panel of zero yields.

    The measurement map is a cubic spline through the model yields on the
    nodes of ``surface``; its Jacobian uses central differences with a 1e-4
    bump.  Tenors missing on a
    date are dropped from that date's update.

    Args:
        params: Model parameters (the physical block drives the prediction).
        panel: Observed zero yields in decimal units.
        surface: Pricing surface covering the panel tenors.
        meas_sd: Measurement error standard deviation, scalar or per tenor,
            in the same units as the scaled yields.
        dt: Time between observations in years.
        yield_scale: Multiplier applied to observed and model yields, e.g.
            1e4 to work in basis points.
        coefficients: Precomputed ``measurement_coefficients`` for the
            panel tenors.
        x0, P0: Prior moments for the first date; the stationary
            distribution by default.

    Raises:
        FilterError: If the innovation covariance is not positive definite or
            the state leaves the grid.
    """
    tenors = np.asarray(panel.tenors, float)
    sd = np.broadcast_to(np.asarray(meas_sd, float), tenors.shape).copy()
    if coefficients is None:
        coefficients = measurement_coefficients(surface, tenors)
    kern = discretize(params, dt)
    x0 = params.theta_P.copy() if x0 is None else np.asarray(x0, float)
    P0 = stationary_covariance(params) if P0 is None else np.asarray(P0, float)
    g = surface.grid
    obs = np.ascontiguousarray(panel.yields * yield_scale)
    xs, Ps, ll, fitted, status, bad = _ekf(
        obs, np.ascontiguousarray(coefficients * yield_scale), g.x1_range[0], g.h1, g.n1, g.x2_range[0], g.h2, g.n2,
        np.ascontiguousarray(kern.F), kern.g, np.ascontiguousarray(kern.V), sd**2, np.ascontiguousarray(x0),
        np.ascontiguousarray(P0), JACOBIAN_BUMP)
    if status == 1:
        raise FilterError(f"innovation covariance not positive definite on {panel.dates[bad]}")
    if status == 2:
        raise FilterError(f"filtered state left the pricing grid on {panel.dates[bad]}")
    resid = np.abs(panel.yields - fitted / yield_scale)
    with np.errstate(invalid="ignore"):
        errors = np.nanmean(np.where(np.isfinite(panel.yields), resid, np.nan), axis=0) * 1e4
    return FilterOutput(panel.dates, xs, Ps, float(ll.sum()), ll, sd, tenors, errors, fitted / yield_scale)


def steady_state_covariance(params: ModelParams, H: np.ndarray, R: np.ndarray, dt: float = DAILY_STEP,
                            iterations: int = 20000) -> np.ndarray:
    """Filtered covariance of the linearised filter in steady state."""
    kern = discretize(params, dt)
    P = stationary_covariance(params)
    for _ in range(iterations):
        Pp = kern.F @ P @ kern.F.T + kern.V
        S = H @ Pp @ H.T + R
        G = Pp @ H.T @ np.linalg.inv(S)
        P_new = (np.eye(2) - G @ H) @ Pp
        if np.abs(P_new - P).max() < 1e-16:
            return P_new
        P = P_new
    return P


def simulate_states(params: ModelParams, n_steps: int, dt: float, rng: np.random.Generator, x0=None) -> np.ndarray:
    """Exact physical-measure path of ``n_steps`` observations."""
    kern = discretize(params, dt)
    chol = psd_sqrt(kern.V)
    x = params.theta_P.copy() if x0 is None else np.asarray(x0, float).copy()
    out = np.empty((n_steps, 2))
    shocks = rng.standard_normal((n_steps, 2))
    for t in range(n_steps):
        if t > 0:
            x = kern.F @ x + kern.g + chol @ shocks[t]
        out[t] = x
    return out


def business_days(start: date, n: int) -> tuple[date, ...]:
    first = np.busday_offset(np.datetime64(start, "D"), 0, roll="forward")
    days = np.busday_offset(first, np.arange(n), roll="forward")
    return tuple(d.astype(object) for d in days)


def simulate_panel(params: ModelParams, surface: PriceSurface, tenors, n_days: int, noise_sd: float,
                   seed: int, start: date = date(2000, 1, 3), x0=None) -> tuple[YieldPanel, np.ndarray]:
    """Synthetic daily zero-yield panel with Gaussian measurement noise.

    Returns:
        The panel and the true state path.

    Raises:
        ValueError: If the simulated path leaves the surface grid.
    """
    rng = np.random.default_rng(seed)
    states = simulate_states(params, n_days, DAILY_STEP, rng, x0)
    try:
        clean = measured_yields(measurement_coefficients(surface, tenors), surface.grid, states)
    except ValueError as exc:
        raise ValueError("simulated path left the pricing grid") from exc
    noisy = clean + noise_sd * rng.standard_normal(clean.shape)
    return YieldPanel(business_days(start, n_days), np.asarray(tenors, float), noisy), states
