"""
Exception hierarchy for surrobench.
Every error that reaches the command line maps to an exit code.
"""

from typing import Optional


class SurrobenchError(Exception):
    """Base class for all workbench errors."""

    exit_code = 1


class ConfigError(SurrobenchError):
    """Invalid, incomplete, or unknown configuration."""

    exit_code = 2


class DataValidationError(SurrobenchError):
    """Input data violates the IPD schema or a dataset invariant."""

    exit_code = 3

    def __init__(self, message: str, row: Optional[int] = None, trial_id: Optional[str] = None):
        self.row = row
        self.trial_id = trial_id
        prefix = []
        if trial_id is not None:
            prefix.append(f"trial {trial_id}")
        if row is not None:
            prefix.append(f"row {row}")
        super().__init__(f"{', '.join(prefix)}: {message}" if prefix else message)


class DomainError(SurrobenchError, ValueError):
    """Argument outside the mathematical domain of an operation."""

    exit_code = 3


class EstimationError(SurrobenchError):
    """A model could not be estimated from the data supplied."""

    exit_code = 4

    def __init__(self, message: str, trial_id: Optional[str] = None):
        self.trial_id = trial_id
        super().__init__(f"trial {trial_id}: {message}" if trial_id is not None else message)


class ConvergenceError(EstimationError):
    """Iterative solver failed to converge."""

    def __init__(self, message: str, residual: float = float("nan"), trial_id: Optional[str] = None):
        self.residual = residual
        super().__init__(f"{message} (residual={residual:.3e})", trial_id=trial_id)


class MonotoneLikelihoodError(EstimationError):
    """Partial likelihood has no finite maximum (estimate diverges)."""


class DegenerateDispersionError(EstimationError):
    """Between-trial effects have no variance in at least one coordinate."""


class ClassificationError(SurrobenchError):
    """Surrogacy estimates are incomplete and cannot be classified."""

    exit_code = 4
