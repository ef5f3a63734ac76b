"""Error types raised by the toolkit.

Every error carries the process exit code the CLI maps it to, the same way the
web handlers used to map failures onto HTTP status codes.
"""
from typing import Optional, Sequence


class ThermoError(Exception):
    exit_code = 1

    def __init__(self, detail: str):
        self.detail = detail
        super().__init__(detail)


class ConfigError(ThermoError):
    exit_code = 2

    def __init__(self, detail: str, line: Optional[int] = None, field: Optional[str] = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(f"{prefix}{detail}")


class PartialFailure(ThermoError):
    exit_code = 3

    def __init__(self, failed: Sequence[str]):
        self.failed = list(failed)
        super().__init__(f"{len(self.failed)} sweep point(s) failed: {', '.join(self.failed)}")


class SingularInversionError(ThermoError):
    def __init__(self, omega: float, magnitude: float):
        self.omega = omega
        self.magnitude = magnitude
        super().__init__(f"|G| = {magnitude:.3e} at omega = {omega:.6g} is too small to invert")


class IntegrityError(ThermoError):
    pass


class QuadratureError(ThermoError):
    def __init__(self, detail: str, grid_size: int, window: float):
        self.grid_size = grid_size
        self.window = window
        super().__init__(f"{detail} (grid of {grid_size} points on [-{window:g}, {window:g}])")


class PrecisionError(ThermoError):
    def __init__(self, site: int, overlap: float, dps: int):
        self.site = site
        self.overlap = overlap
        self.dps = dps
        super().__init__(
            f"chain recursion lost orthogonality at site {site} (overlap {overlap:.2e}); "
            f"rerun with THERMO_WILSON_DPS above {dps}"
        )


class ConvergenceError(ThermoError):
    def __init__(self, detail: str, residuals: Sequence[float]):
        self.residuals = list(residuals)
        super().__init__(f"{detail}; last residual {self.residuals[-1]:.3e}" if self.residuals else detail)


class RangeError(ThermoError):
    pass


class SaturationError(ThermoError):
    pass


class DivergentFisherError(ThermoError):
    pass


class EmptyOverlapError(ThermoError):
    pass
