"""Prompt tuning of a frozen patch extractor for attention-based MIL bag classification."""
from .errors import (ConfigError, ContractError, DimensionError, FormatError, InvariantError, NumericError,
                     PromptMILError, StalenessError)

__version__ = "0.1.0"
