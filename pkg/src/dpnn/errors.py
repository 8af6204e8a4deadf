"""Exception hierarchy shared across the package."""


class DpnnError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DpnnError, ValueError):
    """Tensor or array extents are inconsistent with an operation."""


class ContractError(DpnnError, ValueError):
    """A documented precondition of an operation was violated."""


class DegenerateInputError(ContractError):
    """Input is numerically degenerate (e.g. an all-zero volume)."""


class ConfigError(ContractError):
    """A configuration field is invalid."""


class VolumeIOError(DpnnError, OSError):
    """Base class for binary file format errors."""


class BadMagicError(VolumeIOError):
    pass


class TruncatedFileError(VolumeIOError):
    pass


class DimOverflowError(VolumeIOError):
    pass
