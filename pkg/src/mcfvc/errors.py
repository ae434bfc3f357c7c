"""Exception hierarchy shared by every module."""


class MCFVCError(Exception):
    """Base class for all library errors."""


class DimensionError(MCFVCError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(MCFVCError, ValueError):
    """An argument lies outside the domain of the operation."""


class ContractError(MCFVCError, RuntimeError):
    """A pre/post-condition between components was violated."""


class ConfigurationError(MCFVCError, ValueError):
    """Experiment or model configuration is invalid."""


class TrainingError(MCFVCError, RuntimeError):
    """Optimisation diverged or otherwise failed."""


class ProtocolError(ContractError):
    """Training touched data it must not see (e.g. a future task)."""


class UsageError(MCFVCError):
    """Command-line or run-directory misuse (nothing to report, bad arguments)."""
