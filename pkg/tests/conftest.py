"""Shared, session-cached numerical objects.

The reference-parameter eigenpair and pricing surface come from one PDE march on the
default grid; the surface slices are recorded on the way to the extraction
horizon so the expensive solve runs once per session.
"""

import time
from dataclasses import dataclass

import numpy as np
import pytest
from scipy.linalg import solve_continuous_are

from bqg2.eigenpair import Eigenpair, extract
from bqg2.model import ModelParams, table1_params
from bqg2.pde import GridSpec, PdeSolver, PriceSurface, default_ladder

COARSE = GridSpec(n1=101, n2=101, dt=1 / 48)


@dataclass(frozen=True)
class Table1Solution:
    params: ModelParams
    pair: Eigenpair
    surface: PriceSurface
    seconds: float


@pytest.fixture(scope="session")
def table1():
    return table1_params()


@pytest.fixture(scope="session")
def table1_solution(table1) -> Table1Solution:
    start = time.perf_counter()
    solver = PdeSolver(table1, GridSpec(), record=default_ladder(31.0))
    pair = extract(solver)
    seconds = time.perf_counter() - start
    return Table1Solution(table1, pair, solver.surface(), seconds)


@pytest.fixture(scope="session")
def table1_pair(table1_solution) -> Eigenpair:
    return table1_solution.pair


@pytest.fixture(scope="session")
def table1_surface(table1_solution) -> PriceSurface:
    return table1_solution.surface


@pytest.fixture(scope="session")
def coarse_pair(table1) -> Eigenpair:
    return extract(PdeSolver(table1, COARSE))


def constant_rate_params(c: float) -> ModelParams:
    """Rate pinned at ``c``: a zero quadratic loading and ``rho = c``."""
    base = table1_params()
    return base.replace(rho=c, D1=0.0, D2=0.0, A=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@dataclass(frozen=True)
class QuadraticEigen:
    """Closed-form eigenpair ``exp(-x'Cx - b'x)`` of an unfloored quadratic model."""

    C: np.ndarray
    b: np.ndarray
    lam: float


def quadratic_eigen(params: ModelParams) -> QuadraticEigen:
    """Stationary point of the bond-price Riccati system, from the algebraic Riccati equation."""
    K, S = params.K_Q, params.Sigma @ params.Sigma.T
    C = solve_continuous_are(-K, np.eye(2), params.phi, np.linalg.inv(2 * S))
    Ktheta = K @ params.theta_Q
    b = np.linalg.solve(K.T + 2 * C @ S, 2 * C @ Ktheta)
    lam = params.rho + np.trace(S @ C) - 0.5 * b @ S @ b + b @ Ktheta
    return QuadraticEigen(C, b, float(lam))


def v_zero_params() -> ModelParams:
    """Model whose physical price of risk equals the long-bond price of risk."""
    base = ModelParams.from_risk_neutral(np.diag([0.3, 0.08]), [-0.1, 0.6], 0.002, 0.27, 0.05, 0.0,
                                         np.zeros(2), np.zeros((2, 2)))
    q = quadratic_eigen(base)
    return base.replace(lambda0_P=-base.Sigma.T @ q.b, Lambda_P=-2 * base.Sigma.T @ q.C)


@pytest.fixture(scope="session")
def v_zero():
    return v_zero_params()


@pytest.fixture(scope="session")
def v_zero_pair(v_zero) -> Eigenpair:
    return extract(PdeSolver(v_zero, GridSpec()))
