"""Exception hierarchy. Each class maps to a CLI exit code."""


class PromptMILError(Exception):
    exit_code = 1


class ContractError(PromptMILError, ValueError):
    """A precondition of a public operation was violated."""

    exit_code = 2


class DimensionError(ContractError):
    """Shapes or lengths do not agree."""


class ConfigError(ContractError):
    """Invalid or inconsistent configuration."""


class NumericError(ContractError):
    """A computation produced a non-finite value."""


class FormatError(PromptMILError):
    """An on-disk artifact could not be parsed."""

    exit_code = 3


class StalenessError(FormatError):
    """Cached artifacts were produced by a different checkpoint."""


class InvariantError(PromptMILError):
    """A run-time invariant (e.g. frozen weights unchanged) was breached."""

    exit_code = 4
