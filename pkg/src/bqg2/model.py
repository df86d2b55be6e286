"""Model parameters, short-rate map and parameter restrictions.

The state follows a two-factor Gaussian diffusion

    dX = K_P (theta_P - X) dt + Sigma dB_P

and the short rate is the positive part of a quadratic shadow rate
``rho + x' Phi x``.  Risk-neutral and physical parameters are linked by an
affine market price of risk ``lambda0_P + Lambda_P x``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SIGMA_SCALE = 0.1
CONSISTENCY_TOL = 1e-10


def build_phi(D1: float, D2: float, A: float) -> np.ndarray:
    """Assemble the quadratic loading from its LDL' factors.

    Args:
        D1: First diagonal factor, nonnegative.
        D2: Second diagonal factor, nonnegative.
        A: Off-diagonal entry of the unit lower-triangular factor.

    Returns:
        Symmetric positive definite 2x2 matrix.

    Raises:
        ValueError: If a factor is negative or ``D1 * D2 == 0``.
    """
    if D1 < 0 or D2 < 0:
        raise ValueError(f"D1 and D2 must be nonnegative, got D1={D1}, D2={D2}")
    if D1 * D2 <= 0:
        raise ValueError(f"D1*D2 must be positive, got D1={D1}, D2={D2}")
    lower = np.array([[1.0, 0.0], [A, 1.0]])
    return lower @ np.diag([D1, D2]) @ lower.T


def implied_lambda_P(K_P, theta_P, K_Q, theta_Q, Sigma):
    """Market price of risk implied by a pair of drift specifications.

    Returns:
        Tuple ``(lambda0_P, Lambda_P)``.

    Raises:
        ValueError: If ``Sigma`` is singular.
    """
    Sigma = np.asarray(Sigma, dtype=float)
    if abs(np.linalg.det(Sigma)) < 1e-14:
        raise ValueError("Sigma is singular; market price of risk is not identified")
    K_P, K_Q = np.asarray(K_P, float), np.asarray(K_Q, float)
    Lambda_P = np.linalg.solve(Sigma, K_Q - K_P)
    lambda0_P = np.linalg.solve(Sigma, K_P @ np.asarray(theta_P, float) - K_Q @ np.asarray(theta_Q, float))
    return lambda0_P, Lambda_P


def _as_matrix(value) -> np.ndarray:
    out = np.array(value, dtype=float)
    if out.shape != (2, 2):
        raise ValueError(f"expected a 2x2 matrix, got shape {out.shape}")
    out.setflags(write=False)
    return out


def _as_vector(value) -> np.ndarray:
    out = np.array(value, dtype=float)
    if out.shape != (2,):
        raise ValueError(f"expected a 2-vector, got shape {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ModelParams:
    """Physical and risk-neutral parameters of the two-factor model.

    Both parameter sets are stored; construction rejects any pair that
    violates the market-price-of-risk link by more than 1e-10.  Other
    restrictions (identification, stationarity) are checked by
    :func:`validate` so that invalid sets can still be represented and
    diagnosed.
    """

    K_P: np.ndarray
    theta_P: np.ndarray
    K_Q: np.ndarray
    theta_Q: np.ndarray
    lambda0_P: np.ndarray
    Lambda_P: np.ndarray
    rho: float
    D1: float
    D2: float
    A: float
    Sigma: np.ndarray = field(default_factory=lambda: SIGMA_SCALE * np.eye(2))
    delta: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        for name in ("K_P", "K_Q", "Lambda_P", "Sigma"):
            object.__setattr__(self, name, _as_matrix(getattr(self, name)))
        for name in ("theta_P", "theta_Q", "lambda0_P", "delta"):
            object.__setattr__(self, name, _as_vector(getattr(self, name)))
        for name in ("rho", "D1", "D2", "A"):
            object.__setattr__(self, name, float(getattr(self, name)))
        gap_K = self.K_Q - self.K_P - self.Sigma @ self.Lambda_P
        gap_theta = self.K_Q @ self.theta_Q - self.K_P @ self.theta_P + self.Sigma @ self.lambda0_P
        worst = max(np.abs(gap_K).max(), np.abs(gap_theta).max())
        if not worst <= CONSISTENCY_TOL:
            raise ValueError(f"P/Q parameters are inconsistent (max residual {worst:.3e})")

    @classmethod
    def from_risk_neutral(cls, K_Q, theta_Q, rho, D1, D2, A, lambda0_P, Lambda_P,
                          Sigma=None) -> "ModelParams":
        """Build parameters from the risk-neutral block and the free MPR entries.

        ``Lambda_P[0, 1]`` is overwritten so that ``K_P[0, 1] == 0``; the
        physical drift is derived from the consistency relations.
        """
        Sigma = SIGMA_SCALE * np.eye(2) if Sigma is None else np.asarray(Sigma, float)
        K_Q = np.asarray(K_Q, float)
        theta_Q = np.asarray(theta_Q, float)
        Lambda_P = np.array(Lambda_P, float)
        lambda0_P = np.asarray(lambda0_P, float)
        # only the identified entry is free: K_P[0,1] = K_Q[0,1] - (Sigma Lambda)[0,1] = 0
        Lambda_P[0, 1] = (K_Q[0, 1] - Sigma[0, 1] * Lambda_P[1, 1]) / Sigma[0, 0]
        K_P = K_Q - Sigma @ Lambda_P
        K_P[0, 1] = 0.0
        theta_P = np.linalg.solve(K_P, K_Q @ theta_Q + Sigma @ lambda0_P)
        return cls(K_P=K_P, theta_P=theta_P, K_Q=K_Q, theta_Q=theta_Q, lambda0_P=lambda0_P,
                   Lambda_P=Lambda_P, rho=rho, D1=D1, D2=D2, A=A, Sigma=Sigma)

    @property
    def phi(self) -> np.ndarray:
        # no admissibility check here: degenerate loadings are used in tests
        lower = np.array([[1.0, 0.0], [self.A, 1.0]])
        return lower @ np.diag([self.D1, self.D2]) @ lower.T

    def replace(self, **changes) -> "ModelParams":
        """Return a copy with risk-neutral, rate or MPR fields changed.

        The physical drift is re-derived, so only fields accepted by
        :meth:`from_risk_neutral` may be given.
        """
        base = dict(K_Q=self.K_Q, theta_Q=self.theta_Q, rho=self.rho, D1=self.D1, D2=self.D2,
                    A=self.A, lambda0_P=self.lambda0_P, Lambda_P=self.Lambda_P, Sigma=self.Sigma)
        unknown = set(changes) - set(base)
        if unknown:
            raise TypeError(f"cannot replace derived fields {sorted(unknown)}")
        base.update(changes)
        return ModelParams.from_risk_neutral(**base)


def shadow_rate(params: ModelParams, x) -> np.ndarray:
    """Unfloored rate ``rho + x' Phi x``, vectorised over leading axes of ``x``."""
    x = np.asarray(x, dtype=float)
    phi = params.phi
    quad = phi[0, 0] * x[..., 0] ** 2 + 2.0 * phi[0, 1] * x[..., 0] * x[..., 1] + phi[1, 1] * x[..., 1] ** 2
    return params.rho + quad


def short_rate(params: ModelParams, x) -> np.ndarray:
    """Nominal short rate, the positive part of the shadow rate."""
    return np.maximum(shadow_rate(params, x), 0.0)


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...]

    @property
    def valid(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.valid

    def __str__(self) -> str:
        if self.valid:
            return "parameters valid"
        return "invalid parameters:\n" + "\n".join(f"  - {v}" for v in self.violations)


def validate(params: ModelParams) -> ValidationReport:
    """Check identification, stationarity and rate-loading restrictions."""
    problems = []
    if params.K_P[0, 1] != 0.0:
        problems.append(f"identification: K_P[1,2] must be 0, got {params.K_P[0, 1]:.6g}")
    if np.any(params.delta != 0.0):
        problems.append("identification: delta must be 0")
    if not np.array_equal(params.Sigma, SIGMA_SCALE * np.eye(2)):
        problems.append("identification: Sigma must equal 0.1*I")
    eig = np.linalg.eigvals(params.K_P)
    if np.any(eig.real <= 0):
        problems.append(f"mean reversion: eigenvalues of K_P must have positive real parts, got {np.round(eig, 6)}")
    if params.D1 < 0 or params.D2 < 0:
        problems.append(f"rate loading: D1, D2 must be nonnegative, got {params.D1}, {params.D2}")
    elif params.D1 * params.D2 <= 0:
        problems.append("rate loading: D1*D2 must be positive")
    values = np.concatenate([params.K_P.ravel(), params.K_Q.ravel(), params.theta_P, params.theta_Q,
                             params.lambda0_P, params.Lambda_P.ravel(),
                             [params.rho, params.D1, params.D2, params.A]])
    if not np.all(np.isfinite(values)):
        problems.append("all parameters must be finite")
    return ValidationReport(tuple(problems))


# Serialisation -------------------------------------------------------------

_UNITS = {
    "K_Q": "1/year, risk-neutral mean reversion",
    "theta_Q": "dimensionless, risk-neutral long-run mean",
    "K_P": "1/year, physical mean reversion (derived)",
    "theta_P": "dimensionless, physical long-run mean (derived)",
    "lambda0_P": "constant market price of risk",
    "Lambda_P": "state loading of the market price of risk",
    "Sigma": "volatility loading, fixed",
    "rho": "1/year, shadow-rate shift",
    "D1": "1/year, first diagonal factor of Phi",
    "D2": "1/year, second diagonal factor of Phi",
    "A": "dimensionless, off-diagonal factor of Phi",
}


def _flatten(name: str, value) -> dict[str, float]:
    arr = np.asarray(value, float)
    if arr.ndim == 0:
        return {name: float(arr)}
    if arr.ndim == 1:
        return {f"{name}_{i + 1}": float(v) for i, v in enumerate(arr)}
    return {f"{name}_{i + 1}{j + 1}": float(arr[i, j]) for i in range(2) for j in range(2)}


def params_to_text(params: ModelParams, header: str | None = None,
                   standard_errors: dict[str, float] | None = None) -> str:
    """Serialise parameters to a flat ``key = value`` config section.

    ``standard_errors`` maps flat keys such as ``K_Q_11`` to errors and is
    written to a second section when given.
    """
    lines = []
    if header:
        lines.append(f"# {header}")
    lines.append("[params]")
    for name in ("K_Q", "theta_Q", "rho", "D1", "D2", "A", "lambda0_P", "Lambda_P", "K_P", "theta_P", "Sigma"):
        lines.append(f"# {name}: {_UNITS[name]}")
        for key, val in _flatten(name, getattr(params, name)).items():
            lines.append(f"{key} = {val!r}")
    if standard_errors:
        lines.append("")
        lines.append("[standard_errors]")
        for key, val in standard_errors.items():
            lines.append(f"{key} = {float(val)!r}")
    return "\n".join(lines) + "\n"


def _read_block(section, name: str, shape):
    if shape == ():
        return float(section[name]) if name in section else None
    if shape == (2,):
        keys = [f"{name}_{i + 1}" for i in range(2)]
    else:
        keys = [f"{name}_{i + 1}{j + 1}" for i in range(2) for j in range(2)]
    present = [k in section for k in keys]
    if not any(present):
        return None
    if not all(present):
        missing = [k for k, p in zip(keys, present) if not p]
        raise ValueError(f"incomplete block {name}: missing {missing}")
    return np.array([float(section[k]) for k in keys]).reshape(shape)


def params_from_text(text: str) -> ModelParams:
    """Parse the format written by :func:`params_to_text`.

    The physical drift may be omitted, in which case it is derived.  The
    ``Lambda_P_12`` entry is optional since it is pinned by identification.

    Raises:
        ValueError: On missing keys or inconsistent physical parameters.
    """
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser.read_string(text)
    if "params" not in parser:
        raise ValueError("missing [params] section")
    sec = parser["params"]
    required = {"K_Q": (2, 2), "theta_Q": (2,), "rho": (), "D1": (), "D2": (), "A": (), "lambda0_P": (2,)}
    values = {}
    for name, shape in required.items():
        val = _read_block(sec, name, shape)
        if val is None:
            raise ValueError(f"missing parameter {name}")
        values[name] = val
    lam = np.zeros((2, 2))
    for key, (i, j) in {"Lambda_P_11": (0, 0), "Lambda_P_21": (1, 0), "Lambda_P_22": (1, 1)}.items():
        if key not in sec:
            raise ValueError(f"missing parameter {key}")
        lam[i, j] = float(sec[key])
    sigma = _read_block(sec, "Sigma", (2, 2))
    params = ModelParams.from_risk_neutral(Lambda_P=lam, Sigma=sigma, **values)
    given_K = _read_block(sec, "K_P", (2, 2))
    given_theta = _read_block(sec, "theta_P", (2,))
    for label, given, derived in (("K_P", given_K, params.K_P), ("theta_P", given_theta, params.theta_P)):
        if given is not None and np.abs(given - derived).max() > 1e-8:
            raise ValueError(f"{label} in file disagrees with the value implied by the risk-neutral block")
    return params


def save_params(params: ModelParams, path, header: str | None = None,
                standard_errors: dict[str, float] | None = None) -> None:
    Path(path).write_text(params_to_text(params, header, standard_errors))


def load_params(path) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"parameter file not found: {path}")
    return params_from_text(path.read_text())


# Reference parameter set -----------------------------------------------------

def table1_params() -> ModelParams:
    """Published point estimates, with the physical drift derived."""
    from importlib import resources

    text = resources.files("bqg2.data").joinpath("table1.ini").read_text()
    return params_from_text(text)


def standard_errors_from_text(text: str) -> dict[str, np.ndarray] | None:
    """Standard errors keyed by parameter block, or ``None`` without a
    ``[standard_errors]`` section.

    ``Lambda_P[0, 1]`` carries no independent error since it is implied by
    identification; its entry is NaN.
    """
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser.read_string(text)
    if "standard_errors" not in parser:
        return None
    sec = parser["standard_errors"]

    def get(key):
        if key not in sec:
            raise ValueError(f"missing standard error {key}")
        return float(sec[key])

    return {
        "K_Q": np.array([[get("K_Q_11"), get("K_Q_12")], [get("K_Q_21"), get("K_Q_22")]]),
        "theta_Q": np.array([get("theta_Q_1"), get("theta_Q_2")]),
        "rho": np.array(get("rho")),
        "D1": np.array(get("D1")),
        "D2": np.array(get("D2")),
        "A": np.array(get("A")),
        "lambda0_P": np.array([get("lambda0_P_1"), get("lambda0_P_2")]),
        "Lambda_P": np.array([[get("Lambda_P_11"), np.nan], [get("Lambda_P_21"), get("Lambda_P_22")]]),
    }


def load_standard_errors(path) -> dict[str, np.ndarray] | None:
    return standard_errors_from_text(Path(path).read_text())


def table1_standard_errors() -> dict[str, np.ndarray]:
    """Published standard errors keyed by parameter block."""
    from importlib import resources

    return standard_errors_from_text(resources.files("bqg2.data").joinpath("table1.ini").read_text())


def stationary_mean_rate(params: ModelParams) -> float:
    """Short rate at the physical long-run mean."""
    return float(short_rate(params, params.theta_P))


__all__ = [
    "ModelParams", "ValidationReport", "build_phi", "implied_lambda_P", "load_params", "load_standard_errors",
    "params_from_text", "params_to_text", "save_params", "shadow_rate", "short_rate",
    "standard_errors_from_text", "stationary_mean_rate", "table1_params", "table1_standard_errors", "validate",
]
