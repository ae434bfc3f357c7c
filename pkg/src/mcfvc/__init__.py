"""Class-incremental video captioning with gradient masking and two-stage distillation."""

from .errors import (ConfigurationError, ContractError, DimensionError, DomainError, MCFVCError, ProtocolError,
                     TrainingError, UsageError)
from .training import ExperimentConfig, desk_config

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "ContractError", "DimensionError", "DomainError", "MCFVCError", "ProtocolError",
    "TrainingError", "UsageError", "ExperimentConfig", "desk_config",
]
