"""
Error Hierarchy
===============

All failures raised by cmdp-lab derive from ``CmdpLabError``. Messages are
prefixed with the owning module (``"dpdl: ..."``) so CLI output points at the
layer that failed.
"""

from typing import Any, Optional


class CmdpLabError(Exception):
    """Base class for every cmdp-lab error."""

    exit_code: int = 1

    def __init__(self, module: str, message: str):
        self.module = module
        self.message = message
        super().__init__(f"{module}: {message}")


class InvalidArgumentError(CmdpLabError, ValueError):
    """Inputs violate a documented invariant (dimensions, ranges, distributions)."""

    exit_code = 1


class PreconditionError(CmdpLabError):
    """Inputs are well formed but an operation's precondition does not hold."""

    exit_code = 2


class InfeasibleProblemError(PreconditionError):
    """The CMDP admits no safe policy (or no covered optimal policy)."""


class DataExhaustedError(PreconditionError):
    """An offline dataset ran out of fresh tuples."""

    def __init__(self, module: str, required: int, available: int, partial: Optional[Any] = None):
        self.required = required
        self.available = available
        self.partial = partial
        super().__init__(module, f"dataset exhausted: {required} fresh tuples required, {available} available")


class RoundCapExceededError(PreconditionError):
    """The adaptive driver doubled psi too many times without exiting."""

    def __init__(self, module: str, rounds: int, partial: Optional[Any] = None):
        self.rounds = rounds
        self.partial = partial
        super().__init__(module, f"no exit after {rounds} rounds; C* is effectively infinite for this reference distribution")


class SolverError(CmdpLabError):
    """Internal numerical failure that indicates a bug or tolerance misconfiguration."""

    exit_code = 3
