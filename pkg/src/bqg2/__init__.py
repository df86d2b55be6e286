"""Two-factor quadratic-Gaussian shadow-rate term structure toolkit."""

from bqg2.model import ModelParams, build_phi, short_rate, table1_params, validate

__all__ = ["ModelParams", "build_phi", "short_rate", "table1_params", "validate"]
__version__ = "0.1.0"
