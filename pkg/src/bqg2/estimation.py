"""Quasi-maximum-likelihood estimation through the extended Kalman filter,
with sandwich standard errors."""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from bqg2.kalman import DEFAULT_MEAS_SD, FilterError, FilterOutput, ekf_filter, measurement_coefficients
from bqg2.market_data import YieldPanel
from bqg2.model import ModelParams
from bqg2.pde import GridSpec, PdeInstabilityError, solve_surface

log = logging.getLogger(__name__)

PRICING_NAMES = ("K_Q_11", "K_Q_12", "K_Q_21", "K_Q_22", "theta_Q_1", "theta_Q_2", "rho", "D1", "D2", "A")
MPR_NAMES = ("lambda0_P_1", "lambda0_P_2", "Lambda_P_11", "Lambda_P_21", "Lambda_P_22")
# step sizes that make one unit of each unconstrained coordinate comparable
_SCALES = {
    "K_Q_11": 0.01, "K_Q_12": 0.002, "K_Q_21": 0.02, "K_Q_22": 0.005, "theta_Q_1": 0.05, "theta_Q_2": 0.2,
    "rho": 0.001, "D1": 0.01, "D2": 0.001, "A": 0.01, "lambda0_P_1": 0.1, "lambda0_P_2": 0.1,
    "Lambda_P_11": 1.0, "Lambda_P_21": 1.0, "Lambda_P_22": 0.1,
}
SD_SCALE = 0.1
PENALTY = 1e6


def estimation_grid() -> GridSpec:
    """Coarse grid used inside the likelihood."""
    return GridSpec(n1=51, n2=51, dt=1.0 / 24.0)


def _softplus(u):
    return np.logaddexp(0.0, u)


def _softplus_inv(y):
    return y + np.log(-np.expm1(-y))


def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


class ParameterMap:
    """Bijection between model parameters plus measurement errors and an
    unconstrained, roughly unit-scaled vector.

    ``D1`` and ``D2`` go through a softplus so that they stay positive;
    measurement standard deviations are on a log scale.
    """

    def __init__(self, tenors):
        self.tenors = np.asarray(tenors, float)
        self.names = PRICING_NAMES + MPR_NAMES + tuple(f"sd_{t:g}" for t in self.tenors)
        self.n_pricing = len(PRICING_NAMES)

    def __len__(self) -> int:
        return len(self.names)

    @staticmethod
    def natural(params: ModelParams, sd) -> np.ndarray:
        K, th = params.K_Q, params.theta_Q
        return np.concatenate([
            [K[0, 0], K[0, 1], K[1, 0], K[1, 1], th[0], th[1], params.rho, params.D1, params.D2, params.A],
            [params.lambda0_P[0], params.lambda0_P[1], params.Lambda_P[0, 0], params.Lambda_P[1, 0],
             params.Lambda_P[1, 1]],
            np.asarray(sd, float)])

    def to_unconstrained(self, params: ModelParams, sd) -> np.ndarray:
        nat = self.natural(params, np.broadcast_to(sd, self.tenors.shape))
        u = np.empty(len(self))
        for k, name in enumerate(self.names):
            if name in ("D1", "D2"):
                u[k] = _softplus_inv(nat[k] / _SCALES[name])
            elif name.startswith("sd_"):
                u[k] = np.log(nat[k]) / SD_SCALE
            else:
                u[k] = nat[k] / _SCALES[name]
        return u

    def to_natural(self, u) -> np.ndarray:
        nat = np.empty(len(self))
        for k, name in enumerate(self.names):
            if name in ("D1", "D2"):
                nat[k] = _SCALES[name] * _softplus(u[k])
            elif name.startswith("sd_"):
                nat[k] = np.exp(SD_SCALE * u[k])
            else:
                nat[k] = _SCALES[name] * u[k]
        return nat

    def jacobian(self, u) -> np.ndarray:
        """Diagonal of d(natural)/d(u)."""
        out = np.empty(len(self))
        for k, name in enumerate(self.names):
            if name in ("D1", "D2"):
                out[k] = _SCALES[name] * _sigmoid(u[k])
            elif name.startswith("sd_"):
                out[k] = SD_SCALE * np.exp(SD_SCALE * u[k])
            else:
                out[k] = _SCALES[name]
        return out

    def build(self, u) -> tuple[ModelParams, np.ndarray]:
        """Model parameters and measurement errors; raises on singular drifts."""
        nat = self.to_natural(u)
        K_Q = nat[0:4].reshape(2, 2)
        lam = np.array([[nat[12], 0.0], [nat[13], nat[14]]])
        params = ModelParams.from_risk_neutral(K_Q=K_Q, theta_Q=nat[4:6], rho=nat[6], D1=nat[7], D2=nat[8],
                                               A=nat[9], lambda0_P=nat[10:12], Lambda_P=lam)
        return params, nat[15:]


@dataclass
class EstimationOptions:
    """Optimiser settings.

    Attributes:
        grid: Pricing grid used inside the likelihood.
        starts: Number of starting points; the first is the initial guess,
            the others are Gaussian perturbations of it.
        start_spread: Standard deviation of the perturbations in
            unconstrained units.
        simplex_maxfev: Evaluation cap of the Nelder-Mead stage.
        polish_maxiter: Iteration cap of the quasi-Newton stage.
        gradient_step: Largest central-difference step for gradients, in
            unconstrained units.
        seed: Seed for the start perturbations.
        checkpoint: Optional JSON file updated after each start.
    """

    grid: GridSpec = field(default_factory=estimation_grid)
    starts: int = 5
    start_spread: float = 0.5
    simplex_maxfev: int = 400
    polish_maxiter: int = 30
    gradient_step: float = 1e-3
    seed: int = 0
    checkpoint: str | Path | None = None


class Likelihood:
    """Mean quasi log-likelihood as a function of the unconstrained vector.

    Pricing surfaces are cached on the risk-neutral block and rate
    parameters, since the physical drift and measurement errors do not enter
    the pricing equation.
    """

    def __init__(self, panel: YieldPanel, pmap: ParameterMap, grid: GridSpec, cache_size: int = 64):
        self.panel = panel
        self.pmap = pmap
        self.grid = grid
        self.max_tau = float(np.max(panel.tenors))
        self._cache: OrderedDict[bytes, np.ndarray | None] = OrderedDict()
        self._cache_size = cache_size
        self.evaluations = 0

    def _grids(self, params: ModelParams, u_pricing: np.ndarray):
        key = np.round(u_pricing, 12).tobytes()
        if key in self._cache:
            self._cache.move_to_end(key)
            return self._cache[key]
        try:
            surface = solve_surface(params, self.grid, self.max_tau, ladder=self.panel.tenors)
            grids = measurement_coefficients(surface, self.panel.tenors), surface
        except (PdeInstabilityError, FloatingPointError, ValueError):
            grids = None
        self._cache[key] = grids
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return grids

    def evaluate(self, u) -> FilterOutput | None:
        """Filter output at ``u``; ``None`` when the point is inadmissible."""
        self.evaluations += 1
        u = np.asarray(u, float)
        try:
            params, sd = self.pmap.build(u)
        except (np.linalg.LinAlgError, ValueError):
            return None
        if not np.all(np.isfinite(params.K_P)) or np.any(np.linalg.eigvals(params.K_P).real <= 0):
            return None
        cached = self._grids(params, u[: self.pmap.n_pricing])
        if cached is None:
            return None
        coef, surface = cached
        try:
            return ekf_filter(params, self.panel, surface, sd, coefficients=coef)
        except FilterError:
            return None

    def per_date(self, u) -> np.ndarray | None:
        out = self.evaluate(u)
        return None if out is None else out.loglik_t

    def __call__(self, u) -> float:
        """Negative mean log-likelihood, penalised outside the admissible set."""
        out = self.evaluate(u)
        if out is None or not np.isfinite(out.loglik):
            return PENALTY
        return -out.loglik / len(self.panel)

    def scores(self, u, step, index=None) -> np.ndarray | None:
        """Per-date central-difference scores, shape ``(T, len(index))``."""
        u = np.asarray(u, float)
        index = range(len(u)) if index is None else index
        step = np.broadcast_to(np.asarray(step, float), (len(u),))
        out = np.empty((len(self.panel), len(index)))
        for a, k in enumerate(index):
            e = np.zeros_like(u)
            e[k] = step[k]
            lp, lm = self.per_date(u + e), self.per_date(u - e)
            if lp is None or lm is None:
                return None
            out[:, a] = (lp - lm) / (2 * step[k])
        return out


@dataclass(frozen=True)
class Derivatives:
    """Finite-difference derivatives of the mean log-likelihood.

    Attributes:
        value: Mean log-likelihood at the centre.
        gradient: Central-difference gradient.
        hessian: Central-difference Hessian.
        scores: Per-date central-difference scores, shape ``(T, n)``.
        steps: Difference steps actually used on the diagonal.
    """

    value: float
    gradient: np.ndarray
    hessian: np.ndarray
    scores: np.ndarray
    steps: np.ndarray


def _mean_ll(lik: Likelihood, u):
    out = lik.per_date(u)
    return (None, None) if out is None else (out.sum() / len(out), out)


def curvature_steps(lik: Likelihood, u, idx, fraction: float = 1.0, pilot: float = 0.01,
                    max_step: float = 0.1) -> np.ndarray:
    """Difference steps of ``fraction`` conditional standard errors.

    Each coordinate's curvature of the total log-likelihood is measured with
    a pilot second difference, refined once at the implied step.  Steps
    are capped at ``max_step`` because in weakly identified directions a
    wide step picks up the coupling to the stiff ones.
    """
    u = np.asarray(u, float)
    T = len(lik.panel)
    f0 = lik(u)
    steps = np.empty(len(idx))
    for a, k in enumerate(idx):
        h = pilot
        for _ in range(2):
            e = np.zeros_like(u)
            e[k] = h
            fp, fm = lik(u + e), lik(u - e)
            if fp >= PENALTY or fm >= PENALTY:
                h *= 0.25
                continue
            curv = abs(fp - 2 * f0 + fm) * T / h**2
            h = float(np.clip(fraction / np.sqrt(max(curv, 1e-12)), 1e-5, max_step))
        steps[a] = h
    return steps


def fd_derivatives(lik: Likelihood, u0, idx, steps) -> Derivatives:
    """Gradient, Hessian and scores by central differences.

    A step is halved whenever a perturbed point leaves the admissible set.

    Raises:
        FilterError: If the centre or every candidate step is inadmissible.
    """
    u0 = np.asarray(u0, float)
    f0, _ = _mean_ll(lik, u0)
    if f0 is None:
        raise FilterError("likelihood inadmissible at the centre point")
    n = len(idx)
    steps = np.array(steps, float)
    plus, minus = np.empty(n), np.empty(n)
    scores = np.empty((len(lik.panel), n))
    for a, k in enumerate(idx):
        for _ in range(8):
            e = np.zeros_like(u0)
            e[k] = steps[a]
            (fp, lp), (fm, lm) = _mean_ll(lik, u0 + e), _mean_ll(lik, u0 - e)
            if fp is not None and fm is not None:
                break
            steps[a] *= 0.5
        else:
            raise FilterError(f"no admissible difference step for {lik.pmap.names[k]}")
        plus[a], minus[a] = fp, fm
        scores[:, a] = (lp - lm) / (2 * steps[a])
    H = np.empty((n, n))
    for a, k in enumerate(idx):
        H[a, a] = (plus[a] - 2 * f0 + minus[a]) / steps[a] ** 2
        for b in range(a):
            j = idx[b]
            sa, sb = steps[a], steps[b]
            for _ in range(8):
                e_k = np.zeros_like(u0)
                e_j = np.zeros_like(u0)
                e_k[k] = sa
                e_j[j] = sb
                corners = [_mean_ll(lik, u0 + sk * e_k + sj * e_j)[0] for sk, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1))]
                if all(c is not None for c in corners):
                    break
                sa, sb = 0.5 * sa, 0.5 * sb
            else:
                raise FilterError(f"no admissible cross step for {lik.pmap.names[k]}, {lik.pmap.names[j]}")
            fpp, fpm, fmp, fmm = corners
            H[a, b] = H[b, a] = (fpp - fpm - fmp + fmm) / (4 * sa * sb)
    return Derivatives(f0, scores.mean(axis=0), H, scores, steps)


def _positive_definite(B: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Reflect negative eigenvalues and lift tiny ones."""
    w, V = np.linalg.eigh(0.5 * (B + B.T))
    w = np.maximum(np.abs(w), floor * max(np.abs(w).max(), 1.0))
    return (V * w) @ V.T


def _gradient(lik: Likelihood, u, steps) -> np.ndarray | None:
    """Central-difference gradient of the negative mean log-likelihood."""
    g = np.empty(len(u))
    for k in range(len(u)):
        e = np.zeros_like(u)
        e[k] = steps[k]
        fp, fm = lik(u + e), lik(u - e)
        if fp >= PENALTY or fm >= PENALTY:
            return None
        g[k] = (fp - fm) / (2 * steps[k])
    return g


def quasi_newton(lik: Likelihood, u, maxiter: int, max_step: float, tol: float = 1e-3) -> np.ndarray:
    """BFGS minimisation of the negative mean log-likelihood.

    The curvature matrix starts from a finite-difference Hessian with its
    eigenvalues made positive, which absorbs the very different scales of
    the risk-neutral and physical parameters; gradient differences then
    update it.  Iteration stops once the Newton decrement, in units of the
    total log-likelihood, falls below ``tol``.
    """
    u = np.asarray(u, float).copy()
    idx = list(range(len(u)))
    T = len(lik.panel)
    d = fd_derivatives(lik, u, idx, curvature_steps(lik, u, idx))
    B = _positive_definite(-d.hessian)
    g = -d.gradient
    f = -d.value
    grad_steps = np.clip(0.1 * d.steps, 1e-6, max_step)
    for it in range(maxiter):
        direction = -np.linalg.solve(B, g)
        decrement = -g @ direction * T
        if decrement < tol:
            break
        alpha, accepted = 1.0, False
        for _ in range(30):
            trial = u + alpha * direction
            f_trial = lik(trial)
            if f_trial <= f + 1e-4 * alpha * (g @ direction):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        g_new = _gradient(lik, trial, grad_steps)
        if g_new is None:
            break
        s_k, y_k = trial - u, g_new - g
        u, f, g = trial, f_trial, g_new
        sy = s_k @ y_k
        if sy > 1e-12 * np.linalg.norm(s_k) * np.linalg.norm(y_k):
            Bs = B @ s_k
            B = B - np.outer(Bs, Bs) / (s_k @ Bs) + np.outer(y_k, y_k) / sy
        log.debug("quasi-Newton iteration %d: mean loglik %.8f, step %.3g, decrement %.3g", it, -f, alpha, decrement)
    return u


def _fingerprint(panel: YieldPanel, u0: np.ndarray, opts: EstimationOptions) -> str:
    h = hashlib.sha256()
    h.update(np.nan_to_num(panel.yields, nan=-1.0).tobytes())
    h.update(np.asarray(panel.tenors, float).tobytes())
    h.update(np.round(u0, 12).tobytes())
    g = opts.grid
    h.update(repr((g.x1_range, g.x2_range, g.n1, g.n2, g.dt, opts.starts, opts.start_spread,
                   opts.simplex_maxfev, opts.polish_maxiter, opts.gradient_step, opts.seed)).encode())
    return h.hexdigest()


def _load_checkpoint(path: Path | None, key: str) -> dict:
    fresh = {"key": key, "results": []}
    if path is None or not Path(path).exists():
        return fresh
    state = json.loads(Path(path).read_text())
    if state.get("key") != key:
        log.warning("checkpoint %s belongs to a different problem; starting afresh", path)
        return fresh
    return state


def _save_checkpoint(path: Path | None, state: dict) -> None:
    if path is None:
        return
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(state, indent=1))
    tmp.replace(path)


def estimate(panel: YieldPanel, init: ModelParams, opts: EstimationOptions | None = None,
             meas_sd=DEFAULT_MEAS_SD) -> tuple[ModelParams, FilterOutput]:
    """Maximise the filter quasi log-likelihood.

    Each start runs a Nelder-Mead stage followed by a BFGS polish seeded
    with a finite-difference Hessian.  The best point
    over all starts (and the initial guess itself) is returned, so the likelihood never falls below
    its value at ``init``.

    Args:
        panel: Observed zero yields.
        init: Starting parameters.
        opts: Optimiser settings.
        meas_sd: Starting measurement error standard deviation(s).

    Returns:
        Estimated parameters and the filter output at the optimum; the latter
        carries the estimated measurement errors.
    """
    opts = opts or EstimationOptions()
    pmap = ParameterMap(panel.tenors)
    lik = Likelihood(panel, pmap, opts.grid)
    u0 = pmap.to_unconstrained(init, meas_sd)
    f0 = lik(u0)
    if f0 >= PENALTY:
        raise ValueError("initial parameters give an inadmissible likelihood")
    rng = np.random.default_rng(opts.seed)
    starts = [u0] + [u0 + opts.start_spread * rng.standard_normal(len(u0)) for _ in range(opts.starts - 1)]
    state = _load_checkpoint(opts.checkpoint, _fingerprint(panel, u0, opts))
    done = len(state["results"])
    if done:
        log.info("resuming after %d completed starts", done)

    for k in range(done, len(starts)):
        u = starts[k]
        nm = minimize(lik, u, method="Nelder-Mead",
                      options={"maxfev": opts.simplex_maxfev, "xatol": 1e-4, "fatol": 1e-9, "adaptive": True})
        u = nm.x if nm.fun < lik(u) else u
        u = quasi_newton(lik, u, opts.polish_maxiter, opts.gradient_step)
        value = lik(u)
        log.info("start %d: mean loglik %.6f (init %.6f)", k, -value, -f0)
        state["results"].append({"start": k, "u": u.tolist(), "value": value})
        _save_checkpoint(opts.checkpoint, state)

    best = min(state["results"], key=lambda r: r["value"])
    u_best = np.array(best["u"])
    if best["value"] > f0:
        warnings.warn("optimiser did not improve on the initial parameters", RuntimeWarning, stacklevel=2)
        u_best = u0
    params, _sd = pmap.build(u_best)
    return params, lik.evaluate(u_best)


@dataclass(frozen=True)
class SandwichResult:
    """Robust and Hessian-based standard errors in natural units."""

    names: tuple[str, ...]
    estimates: np.ndarray
    se: np.ndarray
    se_hessian: np.ndarray
    cov_unconstrained: np.ndarray
    n_obs: int

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.se))

    def table(self) -> list[tuple[str, float, float, float]]:
        return list(zip(self.names, self.estimates, self.se, self.se_hessian))


def sandwich_se(params: ModelParams, panel: YieldPanel, meas_sd=DEFAULT_MEAS_SD, grid: GridSpec | None = None,
                names=None, step: float = 1.0) -> SandwichResult:
    """Bollerslev-Wooldridge standard errors ``H^-1 S H^-1 / T``.

    ``H`` is the numerical Hessian of the mean log-likelihood and ``S`` the
    mean outer product of per-date scores, both by central differences in
    the unconstrained coordinates; errors are mapped to natural units by the
    delta method.

    Args:
        params: Parameters at an interior optimum.
        panel: Observed zero yields.
        meas_sd: Measurement error standard deviation(s) at the optimum.
        grid: Pricing grid (the estimation grid by default).
        names: Subset of parameters to perturb; the rest are held fixed.
        step: Difference step as a multiple of each parameter's conditional
            standard error.

    Raises:
        np.linalg.LinAlgError: If the Hessian is singular.
        FilterError: If no admissible difference step exists.
    """
    grid = grid or estimation_grid()
    pmap = ParameterMap(panel.tenors)
    lik = Likelihood(panel, pmap, grid, cache_size=256)
    u0 = pmap.to_unconstrained(params, meas_sd)
    idx = list(range(len(pmap))) if names is None else [pmap.names.index(n) for n in names]
    T = len(panel)

    d = fd_derivatives(lik, u0, idx, curvature_steps(lik, u0, idx, step))
    H, scores = d.hessian, d.scores
    A = -H
    if np.linalg.cond(A) > 1e12:
        raise np.linalg.LinAlgError("Hessian is numerically singular; consider rescaling the parameters")
    A_inv = np.linalg.inv(A)
    S = scores.T @ scores / T
    cov = A_inv @ S @ A_inv / T
    cov_h = A_inv / T
    jac = pmap.jacobian(u0)[idx]
    nat = pmap.to_natural(u0)[idx]
    se = np.abs(jac) * np.sqrt(np.clip(np.diag(cov), 0, None))
    se_h = np.abs(jac) * np.sqrt(np.clip(np.diag(cov_h), 0, None))
    return SandwichResult(tuple(pmap.names[k] for k in idx), nat, se, se_h, cov, T)
