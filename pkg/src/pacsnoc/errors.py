"""Exception hierarchy shared by every module."""
from __future__ import annotations


class PacSnocError(Exception):
    """Base class; ``kind`` is the machine-readable tag used by the CLI."""

    kind = "error"

    def to_dict(self) -> dict:
        return {"error": self.kind, "message": str(self)}


class ConfigurationError(PacSnocError, ValueError):
    kind = "configuration"


class NumericalDivergenceError(PacSnocError, FloatingPointError):
    """A non-finite value appeared; ``step`` and ``index`` locate it when known."""

    kind = "numerical_divergence"

    def __init__(self, message: str, step: int | None = None, index: int | None = None):
        super().__init__(message)
        self.step = step
        self.index = index

    def to_dict(self) -> dict:
        d = super().to_dict()
        d.update(step=self.step, index=self.index)
        return d


class PreconditionError(PacSnocError, ValueError):
    kind = "precondition"

    def __init__(self, message: str, required: int | float | None = None):
        super().__init__(message)
        self.required = required

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["required"] = self.required
        return d


class InsufficientSamplesError(PacSnocError, ArithmeticError):
    kind = "insufficient_samples"


class UnsupportedScenarioError(PacSnocError, ValueError):
    kind = "unsupported_scenario"


class TrainingDivergedError(NumericalDivergenceError):
    kind = "training_diverged"
