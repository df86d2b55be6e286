"""Finite-difference bond pricing on a two-dimensional state grid.

Bond prices solve

    P_tau = 0.5 tr(Sigma Sigma' P_xx) + P_x' K_Q (theta_Q - x) - r(x) P,   P(0, x) = 1.

The solver uses Peaceman-Rachford alternating-direction implicit steps with
the discount term split evenly between the two directional operators.
Because ``Sigma`` is diagonal there is no mixed derivative.

Edge nodes follow a gauge condition: the ratio of the price to the
exponential-quadratic price of the unfloored model is extrapolated linearly
from the two neighbouring nodes along the outward normal.  Far from the floor
region this ratio is nearly constant, which keeps inflow edges stable.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.integrate import solve_ivp

from bqg2.model import ModelParams, shadow_rate

log = logging.getLogger(__name__)

INSTABILITY_TOL = 1e-6


@dataclass(frozen=True)
class Region:
    """Closed axis-aligned rectangle in state space."""

    x1: tuple[float, float]
    x2: tuple[float, float]

    def contains(self, x, tol: float = 1e-12) -> np.ndarray:
        x = np.asarray(x, float)
        return ((x[..., 0] >= self.x1[0] - tol) & (x[..., 0] <= self.x1[1] + tol)
                & (x[..., 1] >= self.x2[0] - tol) & (x[..., 1] <= self.x2[1] + tol))

    def padded(self, fraction: float) -> "Region":
        w1 = fraction * (self.x1[1] - self.x1[0])
        w2 = fraction * (self.x2[1] - self.x2[0])
        return Region((self.x1[0] - w1, self.x1[1] + w1), (self.x2[0] - w2, self.x2[1] + w2))


OMEGA = Region((-0.3, 0.2), (-0.1, 1.2))
PADDED_DOMAIN = OMEGA.padded(0.5)


@dataclass(frozen=True)
class GridSpec:
    """Uniform tensor grid and time step.

    Raises:
        ValueError: If a node count is below 51, ``dt`` exceeds 0.05, or the
            grid does not cover the analytics region.
    """

    x1_range: tuple[float, float] = PADDED_DOMAIN.x1
    x2_range: tuple[float, float] = PADDED_DOMAIN.x2
    n1: int = 201
    n2: int = 201
    dt: float = 1.0 / 96.0

    def __post_init__(self):
        if self.n1 < 51 or self.n2 < 51:
            raise ValueError(f"grid needs at least 51 nodes per axis, got {self.n1}x{self.n2}")
        if not 0 < self.dt <= 0.05:
            raise ValueError(f"time step must lie in (0, 0.05], got {self.dt}")
        if not (self.x1_range[0] <= OMEGA.x1[0] and self.x1_range[1] >= OMEGA.x1[1]
                and self.x2_range[0] <= OMEGA.x2[0] and self.x2_range[1] >= OMEGA.x2[1]):
            raise ValueError("grid must contain [-0.3, 0.2] x [-0.1, 1.2]")

    @property
    def x1(self) -> np.ndarray:
        return np.linspace(self.x1_range[0], self.x1_range[1], self.n1)

    @property
    def x2(self) -> np.ndarray:
        return np.linspace(self.x2_range[0], self.x2_range[1], self.n2)

    @property
    def h1(self) -> float:
        return (self.x1_range[1] - self.x1_range[0]) / (self.n1 - 1)

    @property
    def h2(self) -> float:
        return (self.x2_range[1] - self.x2_range[0]) / (self.n2 - 1)

    def mesh(self) -> np.ndarray:
        """Node coordinates, shape ``(n1, n2, 2)``."""
        X1, X2 = np.meshgrid(self.x1, self.x2, indexing="ij")
        return np.stack([X1, X2], axis=-1)

    def mask(self, region: Region = OMEGA) -> np.ndarray:
        return region.contains(self.mesh(), tol=1e-9)

    def region(self) -> Region:
        return Region(tuple(self.x1_range), tuple(self.x2_range))

    def refined(self) -> "GridSpec":
        """Grid with doubled resolution and halved time step."""
        return GridSpec(self.x1_range, self.x2_range, 2 * self.n1 - 1, 2 * self.n2 - 1, self.dt / 2)


def default_ladder(max_tau: float) -> np.ndarray:
    """Monthly to 2y, quarterly to 40y, yearly beyond."""
    monthly = np.arange(1, 25) / 12.0
    quarterly = 2.0 + np.arange(1, 153) / 4.0
    yearly = np.arange(41.0, max(max_tau, 41.0) + 1.0)
    ladder = np.concatenate([monthly, quarterly, yearly])
    return ladder[ladder <= max_tau + 1e-9]


# Riccati system of the unfloored model ---------------------------------------

def _riccati_rhs(params: ModelParams):
    K, theta = params.K_Q, params.theta_Q
    S = params.Sigma @ params.Sigma.T
    phi = params.phi
    Ktheta = K @ theta

    def rhs(_t, y):
        C = y[:4].reshape(2, 2)
        b = y[4:6]
        dC = phi - 2.0 * C @ S @ C - C @ K - K.T @ C
        db = -K.T @ b - 2.0 * C @ S @ b + 2.0 * C @ Ktheta
        da = params.rho + np.trace(S @ C) - 0.5 * b @ S @ b + b @ Ktheta
        return np.concatenate([dC.ravel(), db, [da]])

    return rhs


@dataclass(frozen=True)
class RiccatiSolution:
    """Dense solution of the exponential-quadratic coefficients."""

    max_tau: float
    _dense: object = field(repr=False)

    def coefficients(self, tau: float) -> tuple[np.ndarray, np.ndarray, float]:
        if tau == 0:
            return np.zeros((2, 2)), np.zeros(2), 0.0
        y = self._dense(tau)
        return y[:4].reshape(2, 2), y[4:6].copy(), float(y[6])

    def log_price(self, tau: float, x) -> np.ndarray:
        C, b, a = self.coefficients(tau)
        x = np.asarray(x, float)
        quad = C[0, 0] * x[..., 0] ** 2 + 2 * C[0, 1] * x[..., 0] * x[..., 1] + C[1, 1] * x[..., 1] ** 2
        return -(a + b[0] * x[..., 0] + b[1] * x[..., 1] + quad)


def solve_riccati(params: ModelParams, max_tau: float, tol: float = 1e-10) -> RiccatiSolution:
    """Integrate the coefficient ODEs of the unfloored model to ``max_tau``.

    Raises:
        RuntimeError: If the adaptive stepper fails.
    """
    sol = solve_ivp(_riccati_rhs(params), (0.0, max_tau), np.zeros(7), method="DOP853",
                    rtol=tol, atol=tol, dense_output=True)
    if not sol.success:
        raise RuntimeError(f"Riccati integration failed: {sol.message}")
    return RiccatiSolution(max_tau, sol.sol)


def riccati_oracle(params: ModelParams, tau: float, x) -> np.ndarray:
    """Closed-form price of the unfloored quadratic model ``exp(-x'Cx - b'x - a)``."""
    if tau == 0:
        return np.ones(np.asarray(x, float).shape[:-1])
    return np.exp(solve_riccati(params, tau).log_price(tau, x))


# Time-stepping kernel ----------------------------------------------------------

@njit(cache=True)
def _gauge_rhs(C, b, K, Ktheta, S, phi):
    SC = S @ C
    dC = phi - 2.0 * C @ SC - C @ K - K.T @ C
    db = -K.T @ b - 2.0 * C @ (S @ b) + 2.0 * C @ Ktheta
    return dC, db


@njit(cache=True)
def _gauge_step(C, b, h, K, Ktheta, S, phi):
    """One RK4 step of the quadratic and linear coefficients of the unfloored price."""
    k1C, k1b = _gauge_rhs(C, b, K, Ktheta, S, phi)
    k2C, k2b = _gauge_rhs(C + 0.5 * h * k1C, b + 0.5 * h * k1b, K, Ktheta, S, phi)
    k3C, k3b = _gauge_rhs(C + 0.5 * h * k2C, b + 0.5 * h * k2b, K, Ktheta, S, phi)
    k4C, k4b = _gauge_rhs(C + h * k3C, b + h * k3b, K, Ktheta, S, phi)
    return (C + h / 6.0 * (k1C + 2.0 * k2C + 2.0 * k3C + k4C),
            b + h / 6.0 * (k1b + 2.0 * k2b + 2.0 * k3b + k4b))


@njit(cache=True)
def _log_gauge(C, b, x1, x2):
    return -(b[0] * x1 + b[1] * x2 + C[0, 0] * x1 * x1 + 2.0 * C[0, 1] * x1 * x2 + C[1, 1] * x2 * x2)


@njit(cache=True)
def _edge_weights(C, b, X1, X2, w):
    """Weights writing each edge node through its two inner neighbours.

    Rows of ``w``: low/high edge in x1 (indexed by j), then low/high edge in
    x2 (indexed by i); two weights each.
    """
    n1, n2 = X1.shape
    for j in range(n2):
        g0 = _log_gauge(C, b, X1[0, j], X2[0, j])
        g1 = _log_gauge(C, b, X1[1, j], X2[1, j])
        g2 = _log_gauge(C, b, X1[2, j], X2[2, j])
        w[0, j] = 2.0 * np.exp(g0 - g1)
        w[1, j] = -np.exp(g0 - g2)
        g0 = _log_gauge(C, b, X1[n1 - 1, j], X2[n1 - 1, j])
        g1 = _log_gauge(C, b, X1[n1 - 2, j], X2[n1 - 2, j])
        g2 = _log_gauge(C, b, X1[n1 - 3, j], X2[n1 - 3, j])
        w[2, j] = 2.0 * np.exp(g0 - g1)
        w[3, j] = -np.exp(g0 - g2)
    for i in range(n1):
        g0 = _log_gauge(C, b, X1[i, 0], X2[i, 0])
        g1 = _log_gauge(C, b, X1[i, 1], X2[i, 1])
        g2 = _log_gauge(C, b, X1[i, 2], X2[i, 2])
        w[4, i] = 2.0 * np.exp(g0 - g1)
        w[5, i] = -np.exp(g0 - g2)
        g0 = _log_gauge(C, b, X1[i, n2 - 1], X2[i, n2 - 1])
        g1 = _log_gauge(C, b, X1[i, n2 - 2], X2[i, n2 - 2])
        g2 = _log_gauge(C, b, X1[i, n2 - 3], X2[i, n2 - 3])
        w[6, i] = 2.0 * np.exp(g0 - g1)
        w[7, i] = -np.exp(g0 - g2)


@njit(cache=True)
def _thomas(a, d, c, r, x, cp, dp, m):
    cp[0] = c[0] / d[0]
    dp[0] = r[0] / d[0]
    for k in range(1, m):
        den = d[k] - a[k] * cp[k - 1]
        cp[k] = c[k] / den
        dp[k] = (r[k] - a[k] * dp[k - 1]) / den
    x[m - 1] = dp[m - 1]
    for k in range(m - 2, -1, -1):
        x[k] = dp[k] - cp[k] * x[k + 1]


@njit(cache=True)
def _march(P, l1, d1, u1, l2, d2, u2, X1, X2, C, b, K, Ktheta, S, phi, hd, n_steps, upper):
    """Advance ``n_steps`` Peaceman-Rachford steps.

    Returns the new slice, gauge coefficients, and the first offending step
    and node (step ``-1`` when every price stayed in ``(0, upper]``).
    """
    n1, n2 = P.shape
    m = max(n1, n2)
    a = np.empty(m)
    dg = np.empty(m)
    c = np.empty(m)
    r = np.empty(m)
    sol = np.empty(m)
    cp = np.empty(m)
    dp = np.empty(m)
    w = np.empty((8, m))
    cur = P.copy()
    half = np.empty_like(P)
    nxt = np.empty_like(P)
    for step in range(n_steps):
        C_mid, b_mid = _gauge_step(C, b, hd, K, Ktheta, S, phi)
        C_end, b_end = _gauge_step(C_mid, b_mid, hd, K, Ktheta, S, phi)

        # implicit in x1, explicit in x2
        _edge_weights(C_mid, b_mid, X1, X2, w)
        mi = n1 - 2
        for j in range(1, n2 - 1):
            for k in range(mi):
                i = k + 1
                r[k] = cur[i, j] + hd * (l2[i, j] * cur[i, j - 1] + d2[i, j] * cur[i, j] + u2[i, j] * cur[i, j + 1])
                a[k] = -hd * l1[i, j]
                dg[k] = 1.0 - hd * d1[i, j]
                c[k] = -hd * u1[i, j]
            dg[0] += a[0] * w[0, j]
            c[0] += a[0] * w[1, j]
            dg[mi - 1] += c[mi - 1] * w[2, j]
            a[mi - 1] += c[mi - 1] * w[3, j]
            _thomas(a, dg, c, r, sol, cp, dp, mi)
            for k in range(mi):
                half[k + 1, j] = sol[k]
            half[0, j] = w[0, j] * half[1, j] + w[1, j] * half[2, j]
            half[n1 - 1, j] = w[2, j] * half[n1 - 2, j] + w[3, j] * half[n1 - 3, j]
        for i in range(n1):
            half[i, 0] = w[4, i] * half[i, 1] + w[5, i] * half[i, 2]
            half[i, n2 - 1] = w[6, i] * half[i, n2 - 2] + w[7, i] * half[i, n2 - 3]

        # implicit in x2, explicit in x1
        _edge_weights(C_end, b_end, X1, X2, w)
        mj = n2 - 2
        for i in range(1, n1 - 1):
            for k in range(mj):
                j = k + 1
                r[k] = half[i, j] + hd * (l1[i, j] * half[i - 1, j] + d1[i, j] * half[i, j] + u1[i, j] * half[i + 1, j])
                a[k] = -hd * l2[i, j]
                dg[k] = 1.0 - hd * d2[i, j]
                c[k] = -hd * u2[i, j]
            dg[0] += a[0] * w[4, i]
            c[0] += a[0] * w[5, i]
            dg[mj - 1] += c[mj - 1] * w[6, i]
            a[mj - 1] += c[mj - 1] * w[7, i]
            _thomas(a, dg, c, r, sol, cp, dp, mj)
            for k in range(mj):
                nxt[i, k + 1] = sol[k]
            nxt[i, 0] = w[4, i] * nxt[i, 1] + w[5, i] * nxt[i, 2]
            nxt[i, n2 - 1] = w[6, i] * nxt[i, n2 - 2] + w[7, i] * nxt[i, n2 - 3]
        for j in range(n2):
            nxt[0, j] = w[0, j] * nxt[1, j] + w[1, j] * nxt[2, j]
            nxt[n1 - 1, j] = w[2, j] * nxt[n1 - 2, j] + w[3, j] * nxt[n1 - 3, j]

        C, b = C_end, b_end
        for i in range(n1):
            for j in range(n2):
                v = nxt[i, j]
                if not (v > 0.0 and v <= upper):
                    return nxt, C, b, step, i, j
        cur, nxt = nxt, cur
    return cur, C, b, -1, 0, 0


class PdeInstabilityError(RuntimeError):
    """Raised when a price leaves its admissible range."""


class PdeSolver:
    """Time-stepping pricer holding the current price slice.

    Args:
        params: Model parameters; only the risk-neutral block and the rate
            loading enter.
        grid: Grid and time step.
        floor: Price with the floored rate (default) or the shadow rate.
        record: Maturities at which to keep a copy of the price slice.
    """

    def __init__(self, params: ModelParams, grid: GridSpec, floor: bool = True, record=()):
        if np.any(params.Sigma != np.diag(np.diag(params.Sigma))):
            raise ValueError("volatility loading must be diagonal (no mixed derivative term)")
        self.params = params
        self.grid = grid
        self.floor = floor
        mesh = grid.mesh()
        X1, X2 = mesh[..., 0], mesh[..., 1]
        shadow = shadow_rate(params, mesh)
        rate = np.maximum(shadow, 0.0) if floor else shadow
        self._rate_min = float(rate.min())
        drift = np.einsum("ij,...j->...i", params.K_Q, params.theta_Q - mesh)
        s1 = 0.5 * params.Sigma[0, 0] ** 2
        s2 = 0.5 * params.Sigma[1, 1] ** 2
        h1, h2 = grid.h1, grid.h2
        self._l1 = s1 / h1**2 - drift[..., 0] / (2 * h1)
        self._u1 = s1 / h1**2 + drift[..., 0] / (2 * h1)
        self._d1 = -2 * s1 / h1**2 - 0.5 * rate
        self._l2 = s2 / h2**2 - drift[..., 1] / (2 * h2)
        self._u2 = s2 / h2**2 + drift[..., 1] / (2 * h2)
        self._d2 = -2 * s2 / h2**2 - 0.5 * rate
        self._X1, self._X2 = X1, X2
        self._K = np.ascontiguousarray(params.K_Q)
        self._Ktheta = params.K_Q @ params.theta_Q
        self._S = params.Sigma @ params.Sigma.T
        self._phi = params.phi
        self._C = np.zeros((2, 2))
        self._b = np.zeros(2)
        self._k = 0
        self.values = np.ones((grid.n1, grid.n2))
        self._record = {int(round(t / grid.dt)): float(t) for t in record}
        for t, k in ((t, int(round(t / grid.dt))) for t in record):
            if abs(k * grid.dt - t) > 1e-9:
                raise ValueError(f"maturity {t} is not a multiple of the time step {grid.dt}")
        self.recorded: dict[float, np.ndarray] = {}

    @property
    def tau(self) -> float:
        return self._k * self.grid.dt

    def _march(self, n_steps: int) -> None:
        upper = np.exp(max(0.0, -self._rate_min) * (self._k + n_steps) * self.grid.dt) * (1.0 + INSTABILITY_TOL)
        P, C, b, bad_step, bi, bj = _march(
            self.values, self._l1, self._d1, self._u1, self._l2, self._d2, self._u2,
            self._X1, self._X2, self._C, self._b, self._K, self._Ktheta, self._S, self._phi,
            0.5 * self.grid.dt, n_steps, upper)
        if bad_step >= 0:
            k = self._k + bad_step + 1
            raise PdeInstabilityError(
                f"price {P[bi, bj]:.6g} out of range at node ({bi}, {bj}) "
                f"x=({self._X1[bi, bj]:.4f}, {self._X2[bi, bj]:.4f}), step {k} (tau={k * self.grid.dt:.4f})")
        self.values, self._C, self._b = P, C, b
        self._k += n_steps

    def step(self) -> None:
        """Advance one time step."""
        self.advance_to((self._k + 1) * self.grid.dt)

    def advance_to(self, tau: float) -> np.ndarray:
        """Step until maturity ``tau`` and return the price slice."""
        target = int(round(tau / self.grid.dt))
        if abs(target * self.grid.dt - tau) > 1e-9:
            raise ValueError(f"maturity {tau} is not a multiple of the time step {self.grid.dt}")
        if target < self._k:
            raise ValueError(f"solver already at tau={self.tau}, cannot go back to {tau}")
        stops = sorted(k for k in self._record if self._k < k <= target)
        for stop in stops + [target]:
            if stop > self._k:
                self._march(stop - self._k)
            if stop in self._record:
                self.recorded[self._record[stop]] = self.values.copy()
        return self.values

    def surface(self) -> "PriceSurface":
        """Surface built from the recorded slices."""
        taus = np.array(sorted(self.recorded))
        values = np.stack([self.recorded[t] for t in taus]) if len(taus) else np.empty((0, self.grid.n1, self.grid.n2))
        rate = shadow_rate(self.params, self.grid.mesh())
        return PriceSurface(self.grid, taus, values, np.maximum(rate, 0.0) if self.floor else rate)


@dataclass(frozen=True)
class PriceSurface:
    """Bond prices on grid nodes for a ladder of maturities.

    ``short_rate`` holds the instantaneous rate on the nodes; it is the
    zero-maturity limit of the yield and anchors interpolation below the
    first ladder point.
    """

    grid: GridSpec
    maturities: np.ndarray
    values: np.ndarray
    short_rate: np.ndarray

    def __post_init__(self):
        if self.values.shape != (len(self.maturities), self.grid.n1, self.grid.n2):
            raise ValueError("surface values do not match the ladder and grid")
        if np.any(np.diff(self.maturities) <= 0) or (len(self.maturities) and self.maturities[0] <= 0):
            raise ValueError("maturity ladder must be positive and increasing")
        self.values.setflags(write=False)

    @property
    def max_tau(self) -> float:
        return float(self.maturities[-1])

    def yields(self) -> np.ndarray:
        """Nodal yields, shape ``(n_tau, n1, n2)``."""
        return -np.log(self.values) / self.maturities[:, None, None]

    def yield_grid(self, tau: float) -> np.ndarray:
        """Nodal yields at ``tau``, linear in maturity between ladder points."""
        ladder = self.maturities
        if not 0 < tau <= self.max_tau + 1e-9:
            raise ValueError(f"maturity {tau} outside ladder range (0, {self.max_tau}]")
        k = int(np.searchsorted(ladder, tau - 1e-12))
        if k < len(ladder) and abs(ladder[k] - tau) < 1e-9:
            return -np.log(self.values[k]) / ladder[k]
        if k == 0:
            t0, y0 = 0.0, self.short_rate
        else:
            t0, y0 = ladder[k - 1], -np.log(self.values[k - 1]) / ladder[k - 1]
        t1, y1 = ladder[k], -np.log(self.values[k]) / ladder[k]
        w = (tau - t0) / (t1 - t0)
        return (1 - w) * y0 + w * y1

    def price_grid(self, tau: float) -> np.ndarray:
        return np.exp(-tau * self.yield_grid(tau))

    def to_csv(self, path, header_lines=()) -> None:
        mesh = self.grid.mesh()
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            writer = csv.writer(fh)
            writer.writerow(["tau", "x1", "x2", "price"])
            for t, slice_ in zip(self.maturities, self.values):
                for (x1, x2), p in zip(mesh.reshape(-1, 2), slice_.ravel()):
                    writer.writerow([f"{t:.10g}", f"{x1:.10g}", f"{x2:.10g}", f"{p:.14g}"])


def cell_weights(grid: GridSpec, x) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Cell indices and fractional offsets for bilinear interpolation.

    Raises:
        ValueError: If any point lies outside the grid, naming the coordinate.
    """
    x = np.asarray(x, float)
    out = []
    for axis, (lo, hi), n, h in ((0, grid.x1_range, grid.n1, grid.h1), (1, grid.x2_range, grid.n2, grid.h2)):
        coord = x[..., axis]
        outside = (coord < lo - 1e-12) | (coord > hi + 1e-12) | ~np.isfinite(coord)
        if np.any(outside):
            bad = np.asarray(coord)[outside].ravel()[0]
            raise ValueError(f"x{axis + 1}={bad:.6g} outside grid range [{lo:g}, {hi:g}]")
        pos = np.clip((coord - lo) / h, 0.0, n - 1.0)
        idx = np.minimum(pos.astype(int), n - 2)
        out.extend([idx, pos - idx])
    return out[0], out[1], out[2], out[3]


def bilinear(grid: GridSpec, field_values: np.ndarray, x) -> np.ndarray:
    """Bilinear interpolation of a nodal field (leading axes broadcast over ``x``)."""
    i, fi, j, fj = cell_weights(grid, x)
    f = field_values
    return ((1 - fi) * (1 - fj) * f[..., i, j] + fi * (1 - fj) * f[..., i + 1, j]
            + (1 - fi) * fj * f[..., i, j + 1] + fi * fj * f[..., i + 1, j + 1])


def yield_at(surface: PriceSurface, tau: float, x) -> np.ndarray:
    """Continuously compounded yield at maturity ``tau`` and state(s) ``x``.

    Log-prices are interpolated bilinearly in the state and yields linearly
    in maturity.  Points outside the grid raise ``ValueError``.
    """
    return bilinear(surface.grid, surface.yield_grid(tau), x)


def price_at(surface: PriceSurface, tau: float, x) -> np.ndarray:
    return np.exp(-tau * yield_at(surface, tau, x))


def solve_surface(params: ModelParams, grid: GridSpec | None = None, max_tau: float = 40.0,
                  ladder=None, floor: bool = True) -> PriceSurface:
    """Price zero-coupon bonds on ``grid`` up to ``max_tau``.

    Args:
        params: Model parameters.
        grid: Grid specification; the default 201x201 grid when omitted.
        max_tau: Longest maturity in years.
        ladder: Maturities to keep; the standard monthly/quarterly/yearly
            ladder when omitted.
        floor: Use the floored short rate.

    Raises:
        PdeInstabilityError: If any price leaves ``(0, 1 + 1e-6]`` (the upper
            bound is relaxed accordingly when the unfloored rate is negative).
    """
    grid = grid or GridSpec()
    if max_tau < grid.dt:
        raise ValueError("max_tau must be at least one time step")
    ladder = default_ladder(max_tau) if ladder is None else np.asarray(sorted(ladder), float)
    solver = PdeSolver(params, grid, floor=floor, record=ladder)
    solver.advance_to(float(ladder[-1]))
    return solver.surface()
