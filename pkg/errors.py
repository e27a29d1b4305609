"""Exception hierarchy for calibration runs.

The CLI maps each family to an exit status: configuration problems exit 1,
data problems exit 2.
"""


class CalibrationError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(CalibrationError, ValueError):
    """Invalid run configuration, flag, range or bound."""


class DataValidationError(CalibrationError, ValueError):
    """Trajectory data that fails parsing or quality control."""


class InvalidParamsError(CalibrationError, ValueError):
    """An IDM parameter set that violates a domain invariant."""


class GapCollapseError(DataValidationError):
    """Forward simulation drove the bumper-to-bumper gap to zero or below."""

    def __init__(self, step: int, gap: float):
        super().__init__(f"gap collapsed to {gap:.6g} m at step {step}")
        self.step = step
        self.gap = gap


class InvalidRegionError(CalibrationError, ArithmeticError):
    """Gradient requested where the log density is -inf."""


EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NOT_CONVERGED = 3
