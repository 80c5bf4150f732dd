"""Exception taxonomy shared across the package.

CLI exit codes map onto these: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class InteractDiffError(Exception):
    """Base class for all package errors."""


class ContractError(InteractDiffError):
    """A caller violated an operation precondition."""


class ShapeError(ContractError):
    """Tensor shapes are incompatible for the requested operation."""


class NumericError(InteractDiffError):
    """Non-finite values or numeric breakdown detected."""


class ConfigError(InteractDiffError):
    """Invalid or inconsistent run configuration."""


class DataError(InteractDiffError):
    """Malformed dataset files or missing data artifacts."""


class GenerationError(DataError):
    """Scene placement could not be satisfied within the retry budget."""


class VocabularyError(ContractError):
    """Unknown label or token id."""


class CapacityError(ContractError):
    """More interaction instances than the configured maximum."""


class CheckpointError(DataError):
    """Corrupt or incompatible checkpoint file."""
