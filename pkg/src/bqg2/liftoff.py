"""First passage of the short rate above a lift-off threshold under the
physical, risk-neutral and long forward measures."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from bqg2.eigenpair import Eigenpair
from bqg2.kalman import ou_transition, psd_sqrt
from bqg2.measures import MeasureTag, log_pi_gradient
from bqg2.model import ModelParams, short_rate
from bqg2.pde import OMEGA

LIFTOFF_THRESHOLD = 0.0025
HORIZON_CAP = 15.0
DEFAULT_DT = 1.0 / 252.0
MAX_ESCAPE_FRACTION = 0.05
BATCH_SIZE = 10_000
CHUNK_STEPS = 126
TAIL_HORIZONS = (1.0, 3.0, 5.0)

ACTIVE, PASSED, ESCAPED = 0, 1, 2


@njit(cache=True)
def _advance_exact(X, status, times, Z, k0, F, g, L, phi, rho, threshold, dt):
    n, m = Z.shape[1], Z.shape[0]
    for p in range(n):
        if status[p] != ACTIVE:
            continue
        x1, x2 = X[p, 0], X[p, 1]
        for s in range(m):
            z1, z2 = Z[s, p, 0], Z[s, p, 1]
            y1 = F[0, 0] * x1 + F[0, 1] * x2 + g[0] + L[0, 0] * z1 + L[0, 1] * z2
            y2 = F[1, 0] * x1 + F[1, 1] * x2 + g[1] + L[1, 0] * z1 + L[1, 1] * z2
            x1, x2 = y1, y2
            r = rho + phi[0, 0] * x1 * x1 + 2.0 * phi[0, 1] * x1 * x2 + phi[1, 1] * x2 * x2
            if max(r, 0.0) >= threshold:
                status[p] = PASSED
                times[p] = (k0 + s + 1) * dt
                break
        X[p, 0], X[p, 1] = x1, x2


@njit(cache=True)
def _bilinear_at(field, x1, x2, lo1, h1, n1, lo2, h2, n2):
    p = (x1 - lo1) / h1
    q = (x2 - lo2) / h2
    i = min(int(p), n1 - 2)
    j = min(int(q), n2 - 2)
    fi = p - i
    fj = q - j
    return ((1 - fi) * (1 - fj) * field[i, j] + fi * (1 - fj) * field[i + 1, j]
            + (1 - fi) * fj * field[i, j + 1] + fi * fj * field[i + 1, j + 1])


@njit(cache=True)
def _advance_long_forward(X, status, times, Z, k0, K, Ktheta, S, SS, grad1, grad2, lo1, h1, n1, lo2, h2, n2,
                          phi, rho, threshold, dt):
    n, m = Z.shape[1], Z.shape[0]
    hi1 = lo1 + h1 * (n1 - 1)
    hi2 = lo2 + h2 * (n2 - 1)
    sq = math.sqrt(dt)
    for p in range(n):
        if status[p] != ACTIVE:
            continue
        x1, x2 = X[p, 0], X[p, 1]
        for s in range(m):
            d1 = _bilinear_at(grad1, x1, x2, lo1, h1, n1, lo2, h2, n2)
            d2 = _bilinear_at(grad2, x1, x2, lo1, h1, n1, lo2, h2, n2)
            b1 = Ktheta[0] - K[0, 0] * x1 - K[0, 1] * x2 + SS[0, 0] * d1 + SS[0, 1] * d2
            b2 = Ktheta[1] - K[1, 0] * x1 - K[1, 1] * x2 + SS[1, 0] * d1 + SS[1, 1] * d2
            z1, z2 = Z[s, p, 0], Z[s, p, 1]
            x1, x2 = (x1 + b1 * dt + sq * (S[0, 0] * z1 + S[0, 1] * z2),
                      x2 + b2 * dt + sq * (S[1, 0] * z1 + S[1, 1] * z2))
            if not (lo1 <= x1 <= hi1 and lo2 <= x2 <= hi2):
                status[p] = ESCAPED
                break
            r = rho + phi[0, 0] * x1 * x1 + 2.0 * phi[0, 1] * x1 * x2 + phi[1, 1] * x2 * x2
            if max(r, 0.0) >= threshold:
                status[p] = PASSED
                times[p] = (k0 + s + 1) * dt
                break
        X[p, 0], X[p, 1] = x1, x2


@dataclass(frozen=True)
class PassageDistribution:
    """Simulated first-passage times of the short rate.

    Attributes:
        tag: Measure the paths were drawn under.
        times: Passage times in years for paths that were not lost to domain
            escape; censored paths carry ``horizon_cap``.
        censored: Mask of paths that had not crossed by ``horizon_cap``.
        n_paths: Number of simulated paths, escaped ones included.
        n_escaped: Paths dropped because they left the eigenfunction grid.
        dt: Time step.
        horizon_cap: Censoring horizon in years.
        threshold: Lift-off level of the short rate.
    """

    tag: MeasureTag
    times: np.ndarray
    censored: np.ndarray
    n_paths: int
    n_escaped: int
    dt: float
    horizon_cap: float
    threshold: float

    @property
    def censored_fraction(self) -> float:
        return float(self.censored.mean()) if len(self.censored) else 0.0

    @property
    def uncensored(self) -> np.ndarray:
        return self.times[~self.censored]


def _batch_sizes(n_paths: int, batch_size: int) -> list[int]:
    full, rest = divmod(n_paths, batch_size)
    return [batch_size] * full + ([rest] if rest else [])


def simulate_liftoff(tag, params: ModelParams, pair: Eigenpair | None, x0, dt: float = DEFAULT_DT,
                     horizon_cap: float = HORIZON_CAP, n_paths: int = 100_000, seed: int = 0,
                     threshold: float = LIFTOFF_THRESHOLD, batch_size: int = BATCH_SIZE,
                     workers: int = 1) -> PassageDistribution:
    """Simulate the first time the short rate reaches ``threshold``.

    Physical and risk-neutral paths use the exact Gaussian transition over
    ``dt``; long forward paths use an Euler step with the drift
    ``K_Q (theta_Q - x) + Sigma Sigma' grad log pi(x)`` interpolated off the
    eigenfunction grid.  Crossings are checked on the time grid only.  Each
    batch of paths draws from its own substream of ``seed``, so the result
    does not depend on ``workers``.

    Args:
        tag: Measure to simulate under.
        params: Model parameters.
        pair: Eigenpair; required for the long forward measure.
        x0: Starting state inside the analytics region.
        dt: Time step in years.
        horizon_cap: Censoring horizon in years.
        n_paths: Number of paths.
        seed: Root seed.
        threshold: Lift-off level.
        batch_size: Paths per substream.
        workers: Threads used to run batches.

    Raises:
        ValueError: If the short rate at ``x0`` is already at or above the
            threshold, or ``x0`` lies outside the analytics region.
        RuntimeError: If more than 5% of long forward paths leave the grid.
    """
    tag = MeasureTag(tag)
    x0 = np.asarray(x0, float)
    if dt <= 0 or horizon_cap <= 0 or n_paths <= 0:
        raise ValueError("dt, horizon_cap and n_paths must be positive")
    domain = pair.domain if pair is not None else OMEGA
    if not domain.contains(x0):
        raise ValueError(f"starting state {x0} lies outside the analytics region")
    if float(short_rate(params, x0)) >= threshold:
        raise ValueError("short rate at the starting state is already at or above the threshold")
    n_steps = int(round(horizon_cap / dt))
    phi = params.phi
    if tag is MeasureTag.L:
        if pair is None:
            raise ValueError("the long forward measure needs an eigenpair")
        grad = log_pi_gradient(pair)
        g = pair.grid
        SS = params.Sigma @ params.Sigma.T
        Ktheta = params.K_Q @ params.theta_Q
        fields = (np.ascontiguousarray(grad[..., 0]), np.ascontiguousarray(grad[..., 1]))
    else:
        K, theta = (params.K_P, params.theta_P) if tag is MeasureTag.P else (params.K_Q, params.theta_Q)
        kern = ou_transition(K, theta, params.Sigma, dt)
        chol = psd_sqrt(kern.V)

    def run(job):
        size, seq = job
        rng = np.random.default_rng(seq)
        X = np.tile(x0, (size, 1))
        status = np.zeros(size, np.int64)
        times = np.full(size, horizon_cap)
        for k0 in range(0, n_steps, CHUNK_STEPS):
            if not np.any(status == ACTIVE):
                break
            m = min(CHUNK_STEPS, n_steps - k0)
            Z = rng.standard_normal((m, size, 2))
            if tag is MeasureTag.L:
                _advance_long_forward(X, status, times, Z, k0, params.K_Q, Ktheta, params.Sigma, SS, *fields,
                                      g.x1_range[0], g.h1, g.n1, g.x2_range[0], g.h2, g.n2, phi, params.rho,
                                      threshold, dt)
            else:
                _advance_exact(X, status, times, Z, k0, kern.F, kern.g, chol, phi, params.rho, threshold, dt)
        return status, times

    sizes = _batch_sizes(n_paths, batch_size)
    jobs = list(zip(sizes, np.random.SeedSequence(seed).spawn(len(sizes))))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]
    status = np.concatenate([r[0] for r in results])
    times = np.concatenate([r[1] for r in results])
    escaped = status == ESCAPED
    n_escaped = int(escaped.sum())
    if n_escaped > MAX_ESCAPE_FRACTION * n_paths:
        raise RuntimeError(f"{n_escaped} of {n_paths} long forward paths left the eigenfunction grid")
    keep = ~escaped
    return PassageDistribution(tag, times[keep], status[keep] == ACTIVE, n_paths, n_escaped, dt, horizon_cap,
                               threshold)


@dataclass(frozen=True)
class PassageSummary:
    """Location and tail statistics of a passage-time distribution.

    ``mean`` averages uncensored paths only; ``censored_fraction`` says how
    much mass it leaves out.  Tail masses count censored paths as beyond
    every horizon below the cap.
    """

    tag: MeasureTag
    median: float
    median_se: float
    mean: float
    censored_fraction: float
    tails: dict[float, float]
    n: int


def _median(sorted_times: np.ndarray) -> float:
    n = len(sorted_times)
    mid = n // 2
    return float(sorted_times[mid]) if n % 2 else float(0.5 * (sorted_times[mid - 1] + sorted_times[mid]))


def summarize(dist: PassageDistribution, min_uncensored: int = 10_000,
              tail_horizons=TAIL_HORIZONS) -> PassageSummary:
    """Median, uncensored mean and right-tail masses.

    The median standard error comes from the binomial confidence interval of
    the order statistics.  Censored paths enter the median at the cap, which
    is harmless while fewer than half of them are censored; otherwise the
    median is reported as infinite.

    Args:
        dist: Simulated distribution.
        min_uncensored: Fewest uncensored paths accepted; lower it to
            acknowledge a thin or heavily censored sample.
        tail_horizons: Horizons for the tail masses.

    Raises:
        ValueError: For an empty sample or too few uncensored paths.
    """
    n = len(dist.times)
    if n == 0:
        raise ValueError("empty passage-time sample")
    unc = dist.uncensored
    if len(unc) < min_uncensored:
        raise ValueError(f"only {len(unc)} uncensored paths; lower min_uncensored to accept this sample")
    ordered = np.sort(np.where(dist.censored, np.inf, dist.times))
    median = _median(ordered)
    z = 1.959963984540054
    half = z * math.sqrt(n) / 2
    lo = max(int(math.floor(n / 2 - half)), 0)
    hi = min(int(math.ceil(n / 2 + half)), n - 1)
    median_se = float((ordered[hi] - ordered[lo]) / (2 * z)) if np.isfinite(ordered[hi]) else math.inf
    mean = float(unc.mean()) if len(unc) else math.nan
    beyond = np.where(dist.censored, np.inf, dist.times)
    tails = {float(h): float((beyond > h).mean()) for h in tail_horizons}
    return PassageSummary(dist.tag, median, median_se, mean, dist.censored_fraction, tails, n)


def write_histogram_csv(path, dists: list[PassageDistribution], bin_width: float = 0.25,
                        header_lines=()) -> None:
    """Counts per passage-time bin and measure; censored paths get a final open bin."""
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["measure", "bin_left", "bin_right", "count"])
        for d in dists:
            edges = np.arange(0.0, d.horizon_cap + bin_width / 2, bin_width)
            counts, _ = np.histogram(d.uncensored, bins=edges)
            for left, right, c in zip(edges[:-1], edges[1:], counts):
                w.writerow([d.tag.value, f"{left:g}", f"{right:g}", int(c)])
            w.writerow([d.tag.value, f"{d.horizon_cap:g}", "inf", int(d.censored.sum())])


def write_summary_csv(path, summaries: list[PassageSummary], header_lines=()) -> None:
    horizons = sorted(summaries[0].tails) if summaries else []
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["measure", "median", "median_se", "mean_uncensored", "censored_fraction"]
                   + [f"tail_{h:g}y" for h in horizons] + ["n_paths"])
        for s in summaries:
            w.writerow([s.tag.value, f"{s.median:.4f}", f"{s.median_se:.4f}", f"{s.mean:.4f}",
                        f"{s.censored_fraction:.4f}"] + [f"{s.tails[h]:.4f}" for h in horizons] + [s.n])
