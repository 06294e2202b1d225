"""
Exception hierarchy for the steganalysis toolkit.

Every error carries the process exit code the CLI should return for it.
"""


class LsgcError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigurationError(LsgcError):
    """Invalid configuration value or combination of values."""

    exit_code = 2


class UsageError(ConfigurationError):
    """Bad command-line usage."""


class DataError(LsgcError):
    """Missing, empty or insufficient data."""

    exit_code = 3


class ExtractionError(DataError):
    """Secret extraction failed, usually because of a parameter mismatch."""


class NumericError(LsgcError):
    """NaN/inf values or a failed numeric check."""

    exit_code = 4


class StorageError(LsgcError):
    """Reading or writing a file failed."""

    exit_code = 5


class ContractError(LsgcError):
    """A caller broke an operation's precondition."""

    exit_code = 6


class ShapeError(ContractError):
    pass


class SequenceLengthError(ContractError):
    pass


class VocabularyError(ContractError):
    pass


class ModeMismatchError(ContractError):
    pass


class LabelIndexError(ContractError, IndexError):
    pass
