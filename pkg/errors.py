"""
Exception and warning types shared by the solver modules.

Library code raises these; only the command-line runner catches them and turns
them into an exit status.
"""

from typing import Any, List, Optional


class QcrError(Exception):
    """Base class for every error raised by the toolkit."""

    reason = "QcrError"

    def as_record(self) -> dict:
        """Machine-readable description used by the CLI on stderr."""
        return {"error": self.reason, "message": str(self)}


class SingularMatrix(QcrError):
    reason = "SingularMatrix"

    def __init__(self, message: str, pivot: Optional[float] = None):
        super().__init__(message)
        self.pivot = pivot


class Breakdown(QcrError):
    """A pivot block of cyclic reduction became singular."""

    reason = "Breakdown"

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step

    def as_record(self) -> dict:
        record = super().as_record()
        record["step"] = self.step
        return record


class ConvergenceFailure(QcrError):
    reason = "ConvergenceFailure"


class NoConvergence(QcrError):
    reason = "NoConvergence"

    def __init__(self, message: str, norms_history: Optional[List[Any]] = None):
        super().__init__(message)
        self.norms_history = list(norms_history or [])


class ShapeMismatch(QcrError, ValueError):
    reason = "ShapeMismatch"


class BadBlockIndex(QcrError, IndexError):
    reason = "BadBlockIndex"


class UnsupportedSize(QcrError):
    reason = "UnsupportedSize"


class ResidualTooLarge(QcrError):
    reason = "ResidualTooLarge"

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message}: residual {residual:.3e}")
        self.residual = residual

    def as_record(self) -> dict:
        record = super().as_record()
        record["residual"] = self.residual
        return record


class SpectralRadiusViolation(QcrError):
    reason = "SpectralRadiusViolation"

    def __init__(self, message: str, radius: float):
        super().__init__(f"{message}: spectral radius {radius:.6f}")
        self.radius = radius


class NoSplitting(QcrError):
    """An eigenvalue of the Laurent polynomial lies on the unit circle."""

    reason = "NoSplitting"


class DomainError(QcrError, ValueError):
    reason = "DomainError"


class PoleCollision(QcrError):
    reason = "PoleCollision"


class NotDiagonalizable(QcrError):
    reason = "NotDiagonalizable"

    def __init__(self, message: str, condition: float):
        super().__init__(f"{message}: eigenvector condition {condition:.3e}")
        self.condition = condition


class NotToeplitz(QcrError, ValueError):
    reason = "NotToeplitz"


class GenerationFailure(QcrError):
    reason = "GenerationFailure"


class AliasWarning(UserWarning):
    """Laurent coefficients were requested with too few terms or samples."""


class FallbackWarning(UserWarning):
    """The dense block-tridiagonal path replaced the cyclic reduction path."""
