"""
Exception hierarchy shared by the lab services, the CLI and the HTTP API
"""
from typing import Optional


class LabError(Exception):
    """Base class for every error raised by the lab"""

    exit_code = 1
    status_code = 500


class ConfigError(LabError, ValueError):
    """Invalid configuration, disorder specification or operation parameters"""

    exit_code = 2
    status_code = 400


class DimensionMismatchError(ConfigError):
    """Array shapes disagree with each other or with a requested size"""


class MatrixFormatError(LabError):
    """A coupling-matrix file is malformed, truncated or fails its checksum"""

    exit_code = 2
    status_code = 400


class GateViolationError(LabError):
    """An exact computation was requested above its size gate"""

    exit_code = 3
    status_code = 422

    def __init__(self, operation: str, size: int, gate: int):
        self.operation = operation
        self.size = size
        self.gate = gate
        super().__init__(f"{operation}: size {size} exceeds gate {gate}")


class NonConvergenceError(LabError):
    """An iterative solver stopped before reaching its tolerance"""

    exit_code = 4
    status_code = 500

    def __init__(self, message: str, best_estimate: Optional[float] = None, residual: Optional[float] = None):
        self.best_estimate = best_estimate
        self.residual = residual
        super().__init__(f"{message} (best estimate={best_estimate}, residual={residual})")


def require_gate(operation: str, size: int, gate: int) -> None:
    """Raise GateViolationError when size exceeds gate"""
    if size > gate:
        raise GateViolationError(operation, size, gate)
