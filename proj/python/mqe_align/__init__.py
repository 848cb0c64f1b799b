"""Point-cloud / language alignment with a mixture of query experts."""

from ._core import (
    AuditError,
    Config,
    ConfigError,
    ContractError,
    DimensionError,
    Error,
    FormatError,
    LoadError,
    NumericError,
    SequenceError,
    Trainer,
    budget_table,
    gen_synthetic,
    gradcheck,
    load_objects,
    lr_at,
    param_budget,
)

__all__ = [
    "AuditError",
    "Config",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "Error",
    "FormatError",
    "LoadError",
    "NumericError",
    "SequenceError",
    "Trainer",
    "budget_table",
    "gen_synthetic",
    "gradcheck",
    "load_objects",
    "lr_at",
    "param_budget",
]
