"""
Exception hierarchy for mlopt.

Every exception carries the exit code the command line maps it to:
2 for configuration and structural problems, 3 for numerical failures,
4 for dataset problems.
"""


class MloptError(Exception):
    exit_code = 1

    def __init__(self, message: str):
        super().__init__(message)
        # Outer step index, attached by optim.run when the error escapes a run.
        self.step: int | None = None


class ConfigError(MloptError):
    exit_code = 2


class StructuralError(MloptError):
    """Shapes, level counts or family preconditions do not match."""

    exit_code = 2

    def __init__(self, message: str, level: int | None = None, block: str | None = None):
        super().__init__(message)
        self.level = level
        self.block = block


class CapabilityError(MloptError):
    """An oracle lacks a derivative order the requested path needs."""

    exit_code = 2


class NumericError(MloptError):
    exit_code = 3

    def __init__(self, message: str, level: int | None = None, coordinate: int | None = None):
        super().__init__(message)
        self.level = level
        self.coordinate = coordinate


class SingularHessian(NumericError):
    """
    A Hessian (or reduced Hessian) that must be positive definite is not.

    pivot is the 0-based index of the failing Cholesky pivot, or None when
    the failure was detected by conjugate gradients.
    """

    def __init__(self, message: str, pivot: int | None = None, level: int | None = None):
        super().__init__(message, level=level)
        self.pivot = pivot


class StalePoint(NumericError):
    """A lower level is further from stationarity than the caller allows."""

    def __init__(self, level: int, residual: float, tol: float):
        super().__init__(
            f"level {level + 1} stationarity residual {residual:.3e} exceeds tolerance {tol:.1e}",
            level=level,
        )
        self.residual = residual
        self.tol = tol


class DivergedLowerLevel(NumericError):
    pass


class ConvergenceBudget(NumericError):
    def __init__(self, message: str, residuals: list[float]):
        super().__init__(message)
        self.residuals = residuals


class DatasetError(MloptError):
    exit_code = 4

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        super().__init__(message)
        self.path = path
        self.line = line
