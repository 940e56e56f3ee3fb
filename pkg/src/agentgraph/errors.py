"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""

from __future__ import annotations


class AgentGraphError(Exception):
    exit_code = 1


class UsageError(AgentGraphError):
    exit_code = 2


class InputError(UsageError, ValueError):
    """Bad caller-supplied value (empty text, out-of-range size, ...)."""


class ConfigurationError(UsageError):
    """Inconsistent configuration: shapes, missing settings, missing script entries."""


class DataError(AgentGraphError, ValueError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message: str, position: int | None = None):
        super().__init__(message if position is None else f"{message} (token {position})")
        self.position = position


class StructureError(DataError):
    """Graph structure violates the DAG contract (cycle, bad ordering)."""


class SynthesisQualityError(DataError):
    pass


class CheckpointError(DataError):
    def __init__(self, message: str, offending: list[str] | None = None):
        if offending:
            message = f"{message}: {', '.join(offending)}"
        super().__init__(message)
        self.offending = list(offending or [])


class NumericError(AgentGraphError, ArithmeticError):
    exit_code = 4


class DimensionError(NumericError, ValueError):
    pass


class ContractError(NumericError):
    pass


class TransportError(AgentGraphError):
    exit_code = 5

    def __init__(self, message: str, diagnostics: dict | None = None, retryable: bool = True):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
        self.retryable = retryable


class ExecutionError(AgentGraphError):
    def __init__(self, message: str, partial_report=None):
        super().__init__(message)
        self.partial_report = partial_report
