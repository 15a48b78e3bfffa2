"""Exception types raised across the package."""


class AidError(Exception):
    """Base class for aidkit errors."""


class DimensionError(AidError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(AidError, ValueError):
    """Input is valid in shape but degenerate (e.g. zero norm)."""


class DomainError(AidError, ValueError):
    """Argument outside the mathematical domain of the function."""


class ConfigError(AidError, ValueError):
    """Invalid or inconsistent configuration."""


class TrainingError(AidError, RuntimeError):
    def __init__(self, step: int, message: str = "loss became non-finite"):
        super().__init__(f"training diverged at step {step}: {message}")
        self.step = step


class OptimizationError(AidError, RuntimeError):
    def __init__(self, point, message: str = "objective returned NaN"):
        super().__init__(f"{message} at point {tuple(float(p) for p in point)}")
        self.point = tuple(point)


class ArchiveError(AidError, ValueError):
    """Malformed checkpoint or sequence archive."""
