"""Exception types shared across the package."""


class SlopeLabError(Exception):
    pass


class ConfigError(SlopeLabError, ValueError):
    """Invalid configuration, specification or input file."""


class ContractError(SlopeLabError, ValueError):
    """An argument violates an operation's precondition (shape, variant, range)."""


class NonConvergenceError(SlopeLabError, RuntimeError):
    def __init__(self, message, residual, iterations):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual
        self.iterations = iterations


class DivergenceError(SlopeLabError, RuntimeError):
    def __init__(self, message, iterations=None, trace=None):
        super().__init__(message)
        self.iterations = iterations
        self.trace = trace


class PlanningError(SlopeLabError, RuntimeError):
    """Every sampled candidate was rejected."""
