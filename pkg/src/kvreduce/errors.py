"""Exception hierarchy shared across the package.

The CLI maps each family to a distinct exit code (see ``kvreduce.cli``).
"""


class KvReduceError(Exception):
    """Base class for all package errors."""


class DomainError(KvReduceError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ContractError(KvReduceError, RuntimeError):
    """Internal state disagrees with what an operation requires (desync, unknown slot, ...)."""


class ConfigError(KvReduceError, ValueError):
    """Invalid decoder, policy or run configuration."""


class TraceParseError(KvReduceError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TraceVersionError(KvReduceError, ValueError):
    """Trace header names an unknown format or version."""


class IncompatibleTraceError(KvReduceError, ValueError):
    """A replay needs logits the trace does not contain."""
