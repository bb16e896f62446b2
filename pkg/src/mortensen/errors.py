"""Exception types shared across the package, mapped to CLI exit codes."""


class MortensenError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(MortensenError):
    """Invalid configuration or inconsistent inputs (exit code 2).

    The message starts with the dotted field path when the error originates
    from a configuration file.
    """

    exit_code = 2


class DivergenceError(MortensenError):
    """NaN/Inf produced while time stepping; carries the first bad step."""

    exit_code = 3

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NonconvergenceError(MortensenError):
    """An iterative solver exhausted its budget (exit code 3)."""

    exit_code = 3

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class TrustRegionError(NonconvergenceError):
    """Data or iterates left the configured trust region.

    The local well-posedness of the minimum-energy problem is only certified
    on small data; rather than silently diverge, solvers refuse and instruct
    the caller to shrink the disturbance amplitudes.
    """

    exit_code = 3


class CoercivityLossError(MortensenError):
    """A value-function Hessian lost its coercivity margin (exit code 4)."""

    exit_code = 4

    def __init__(self, message, margin=None):
        super().__init__(message)
        self.margin = margin
