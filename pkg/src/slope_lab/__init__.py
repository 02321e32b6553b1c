"""Potential-landscape reward shaping laboratory (tabular and point-mass scale)."""
from ._jit import backend
from .errors import (ConfigError, ContractError, DivergenceError, NonConvergenceError,
                     PlanningError, SlopeLabError)

__version__ = "0.1.0"

__all__ = [
    "backend",
    "ConfigError",
    "ContractError",
    "DivergenceError",
    "NonConvergenceError",
    "PlanningError",
    "SlopeLabError",
]
