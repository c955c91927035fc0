"""Exception hierarchy shared by the library and the command-line interface."""


class RoutingError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(RoutingError, ValueError):
    """Invalid user-supplied configuration (fractions, alpha, lambda, ...)."""


class ParseError(RoutingError, ValueError):
    """A dataset file could not be parsed."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class ValidationError(RoutingError, ValueError):
    """Data parsed but violates a domain invariant."""


class DimensionError(RoutingError, ValueError):
    """Matrix operands have non-conforming shapes."""


class TrainingDivergenceError(RoutingError, ArithmeticError):
    """Loss or gradient became non-finite during optimisation."""


class StateError(RoutingError, RuntimeError):
    """An object was used before it reached the required state."""


class NoPathError(RoutingError):
    """The target node is not reachable from the source node."""


class SamplingError(RoutingError):
    """Random sampling failed to produce a valid draw."""
