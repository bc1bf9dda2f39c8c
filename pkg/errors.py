"""errors.py – exception hierarchy; ``exit_code`` is what lrei.py returns."""
from typing import Optional, Sequence


class LreiError(Exception):
    exit_code = 1


class ConfigError(LreiError):
    exit_code = 2

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        self.field = field
        self.line = line
        where = ""
        if field:
            where = f"[{field}" + (f", line {line}" if line else "") + "] "
        super().__init__(f"{where}{message}")


class StepGridError(LreiError, ValueError):
    exit_code = 2


class StateError(LreiError, ValueError):
    exit_code = 2


class DimensionMismatchError(LreiError, ValueError):
    exit_code = 2


class NumericalAbort(LreiError):
    exit_code = 3

    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        super().__init__(message if step is None else f"step {step}: {message}")


class LanczosConvergenceError(NumericalAbort):
    def __init__(self, message: str, residuals: Sequence[float] = (), stage: Optional[int] = None):
        self.residuals = list(residuals)
        self.stage = stage
        suffix = f" (stage {stage})" if stage is not None else ""
        super().__init__(f"{message}{suffix}; best residuals {self.residuals}")


class RankDeficiencyError(NumericalAbort):
    def __init__(self, column: int, norm: float):
        self.column = column
        super().__init__(f"factor is rank deficient at column {column} (pivot norm {norm:.3e})")


class ObservableError(NumericalAbort):
    pass


class ResourceGuardError(LreiError):
    exit_code = 4
