"""
Error types shared by the numerical core, the CLI and the HTTP surface.
Each error class knows the process exit code and the HTTP status it maps to.
"""


class HeatSourceError(Exception):
    """Base class for every error raised by the toolkit."""

    exit_code = 1
    status_code = 500


class ArgumentError(HeatSourceError, ValueError):
    """Invalid input: bad dimensions, out-of-range parameters, unknown presets."""

    exit_code = 1
    status_code = 400


class SolverError(HeatSourceError, RuntimeError):
    """
    An iterative solver failed to reach its tolerance.

    Args:
        message (str): Human readable description
        residual (float): Final residual norm reached by the solver
        iterations (int): Number of iterations performed
    """

    exit_code = 2
    status_code = 500

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations


class ParseError(HeatSourceError, ValueError):
    """A measurement, configuration or report file could not be decoded."""

    exit_code = 3
    status_code = 400


class ReportIOError(HeatSourceError, OSError):
    """A report or data file could not be written or read."""

    exit_code = 3
    status_code = 500
