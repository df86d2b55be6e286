"""Principal eigenpair of the pricing operator and the long bond.

Ratios of bond prices one year apart, ``P(n+1, x) / P(n, x)``, converge to
``exp(-lambda)`` uniformly in ``x`` as ``n`` grows.  The extraction stops at
the first horizon where the spread of these ratios over the analytics region
falls below a tolerance, and then ``pi(x)`` is proportional to
``exp(lambda N) P(N, x)``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from datetime import date

import numpy as np

from bqg2.pde import OMEGA, GridSpec, PdeSolver, Region, bilinear

log = logging.getLogger(__name__)

X_REF = (0.0, 0.0)
DEFAULT_EPS = 1e-4
HORIZON_CAP = 200


class ExtractionError(RuntimeError):
    """Eigenvalue ratios failed to settle before the horizon cap."""


@dataclass(frozen=True)
class Eigenpair:
    """Principal eigenvalue and eigenfunction on the pricing grid.

    Attributes:
        lam: Eigenvalue rate, so that ``exp(-lam)`` is the one-year eigenvalue.
        log_pi: Log eigenfunction on every grid node, zero at the reference state.
        N: Stopping horizon in years.
        eps: Tolerance on the ratio spread.
        gap: Ratio spread ``M_N - m_N`` at the stopping horizon.
        ratio_bounds: ``(m_N, M_N)``.
        grid: Grid on which ``log_pi`` lives.
        domain: Region over which the ratios were compared.
    """

    lam: float
    log_pi: np.ndarray
    N: int
    eps: float
    gap: float
    ratio_bounds: tuple[float, float]
    grid: GridSpec
    domain: Region = OMEGA

    @property
    def pi(self) -> np.ndarray:
        return np.exp(self.log_pi)

    def log_pi_at(self, x) -> np.ndarray:
        """Bilinear interpolation of ``log pi``; points must lie in the grid."""
        return bilinear(self.grid, self.log_pi, x)

    def pi_at(self, x) -> np.ndarray:
        return np.exp(self.log_pi_at(x))

    def rescaled(self, factor: float) -> "Eigenpair":
        """Same pair with ``pi`` multiplied by a positive constant."""
        if factor <= 0:
            raise ValueError("scale factor must be positive")
        return Eigenpair(self.lam, self.log_pi + np.log(factor), self.N, self.eps, self.gap,
                         self.ratio_bounds, self.grid, self.domain)

    def to_csv(self, path, header_lines=(), domain_only: bool = True) -> None:
        mesh = self.grid.mesh()
        mask = self.grid.mask(self.domain) if domain_only else np.ones(self.log_pi.shape, bool)
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write(f"# lambda={self.lam:.10g} N={self.N} eps={self.eps:g} gap={self.gap:.6g}\n")
            writer = csv.writer(fh)
            writer.writerow(["x1", "x2", "pi"])
            for (x1, x2), v in zip(mesh[mask], self.pi[mask]):
                writer.writerow([f"{x1:.10g}", f"{x2:.10g}", f"{v:.14g}"])


def save_eigenpair(pair: Eigenpair, path) -> None:
    """Write an eigenpair, its grid and region to a ``.npz`` archive."""
    g, d = pair.grid, pair.domain
    with open(path, "wb") as fh:
        np.savez(fh, lam=pair.lam, log_pi=pair.log_pi, N=pair.N, eps=pair.eps, gap=pair.gap,
                 ratio_bounds=np.array(pair.ratio_bounds), x1_range=np.array(g.x1_range),
                 x2_range=np.array(g.x2_range), shape=np.array([g.n1, g.n2]), dt=g.dt,
                 domain=np.array([d.x1, d.x2]))


def load_eigenpair(path) -> Eigenpair:
    with np.load(path) as z:
        n1, n2 = (int(v) for v in z["shape"])
        grid = GridSpec(tuple(z["x1_range"].tolist()), tuple(z["x2_range"].tolist()), n1, n2, float(z["dt"]))
        dom = z["domain"]
        return Eigenpair(float(z["lam"]), z["log_pi"].copy(), int(z["N"]), float(z["eps"]), float(z["gap"]),
                         tuple(z["ratio_bounds"].tolist()), grid, Region(tuple(map(float, dom[0])), tuple(map(float, dom[1]))))


def extract(solver: PdeSolver, eps: float = DEFAULT_EPS, domain: Region = OMEGA,
            horizon_cap: int = HORIZON_CAP) -> Eigenpair:
    """Run the solver forward in whole years until the price ratios settle.

    Args:
        solver: Solver positioned at maturity zero (or at a whole year).  It is
            advanced in place, so slices it records along the way remain usable.
        eps: Tolerance on ``M_n - m_n``, the spread of one-year price ratios
            over the nodes of ``domain``.
        domain: Region on which ratios are compared.
        horizon_cap: Largest horizon tried, in years.

    Raises:
        ExtractionError: If the spread is still above ``eps`` at the cap.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    grid = solver.grid
    mask = grid.mask(domain)
    if not mask.any():
        raise ValueError("domain contains no grid nodes")
    n = int(round(solver.tau))
    if abs(n - solver.tau) > 1e-9:
        raise ValueError("solver must start at a whole-year maturity")
    n = max(n, 1)
    current = solver.advance_to(float(n)).copy()
    gap = np.inf
    while n < horizon_cap:
        following = solver.advance_to(float(n + 1)).copy()
        ratio = following[mask] / current[mask]
        low, high = float(ratio.min()), float(ratio.max())
        gap = high - low
        if gap <= eps:
            lam = -np.log(0.5 * (low + high))
            log_pi = lam * n + np.log(current)
            log_pi -= bilinear(grid, log_pi, X_REF)
            log.info("eigenpair settled at N=%d: lambda=%.6f gap=%.3e", n, lam, gap)
            return Eigenpair(float(lam), log_pi, n, eps, gap, (low, high), grid, domain)
        current = following
        n += 1
    raise ExtractionError(f"ratios did not settle by {horizon_cap}y; last gap {gap:.3e} > eps {eps:g}")


@dataclass(frozen=True)
class ExpQuadFit:
    """``pi(x) ~ exp(x'Qx + l'x + c)`` on a region.

    ``coefficients`` lists the loadings on ``(x1^2, x2^2, x1 x2, x1, x2)``.
    """

    Q: np.ndarray
    l: np.ndarray
    c: float
    max_rel_error: float

    @property
    def coefficients(self) -> np.ndarray:
        return np.array([self.Q[0, 0], self.Q[1, 1], 2 * self.Q[0, 1], self.l[0], self.l[1]])

    def log_pi(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        quad = self.Q[0, 0] * x[..., 0] ** 2 + 2 * self.Q[0, 1] * x[..., 0] * x[..., 1] + self.Q[1, 1] * x[..., 1] ** 2
        return quad + self.l[0] * x[..., 0] + self.l[1] * x[..., 1] + self.c

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        return 2.0 * np.einsum("ij,...j->...i", self.Q, x) + self.l

    def describe(self) -> str:
        q11, q22, q12, l1, l2 = self.coefficients
        return (f"pi(x) ~ exp({q11:+.4f} x1^2 {q22:+.4f} x2^2 {q12:+.4f} x1 x2 "
                f"{l1:+.4f} x1 {l2:+.4f} x2)  [max rel. error {self.max_rel_error:.2%}]")


def fit_exp_quadratic(pair: Eigenpair, domain: Region | None = None) -> ExpQuadFit:
    """Least-squares quadratic fit of ``log pi`` on the nodes of ``domain``.

    Raises:
        ValueError: If the nodes do not support a full quadratic.
    """
    domain = domain or pair.domain
    mesh = pair.grid.mesh()
    mask = pair.grid.mask(domain)
    x = mesh[mask]
    design = np.column_stack([x[:, 0] ** 2, x[:, 1] ** 2, x[:, 0] * x[:, 1], x[:, 0], x[:, 1], np.ones(len(x))])
    if len(x) < 6 or np.linalg.matrix_rank(design) < 6:
        raise ValueError("domain is degenerate: quadratic fit is rank deficient")
    target = pair.log_pi[mask]
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    Q = np.array([[coef[0], 0.5 * coef[2]], [0.5 * coef[2], coef[1]]])
    fitted = design @ coef
    rel = float(np.abs(np.expm1(fitted - target)).max())
    return ExpQuadFit(Q, coef[3:5].copy(), float(coef[5]), rel)


def long_bond_path(pair: Eigenpair, times, states) -> np.ndarray:
    """Gross return of the long bond ``exp(lam t) pi(X_t) / pi(X_0)``.

    Args:
        pair: Eigenpair.
        times: Either year offsets from the first observation or calendar dates
            (converted with ACT/365).
        states: Array of shape ``(T, 2)``.

    Raises:
        ValueError: If a state lies outside the pair's region.
    """
    states = np.asarray(states, float)
    inside = pair.domain.contains(states, tol=1e-9)
    if not inside.all():
        k = int(np.argmin(inside))
        raise ValueError(f"state {states[k]} at position {k} lies outside the analytics region")
    times = list(times)
    if times and isinstance(times[0], date):
        t = np.array([(d - times[0]).days / 365.0 for d in times])
    else:
        t = np.asarray(times, float) - float(times[0])
    log_pi = pair.log_pi_at(states)
    return np.exp(pair.lam * t + log_pi - log_pi[0])
