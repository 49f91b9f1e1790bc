"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operands have incompatible shapes."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite or undefined value.

    ``op`` names the offending operation and ``step`` the solver step index,
    when known. ``rows`` lists the offending batch rows (trajectories).
    """

    def __init__(self, message, op=None, step=None, rows=None):
        super().__init__(message)
        self.op = op
        self.step = step
        self.rows = rows


class ScheduleError(ValueError):
    """A time lies outside a control schedule's domain."""


class SwarmError(RuntimeError):
    """Every run of a multi-start optimization failed."""


class ConfigError(ValueError):
    """An experiment configuration is malformed."""
