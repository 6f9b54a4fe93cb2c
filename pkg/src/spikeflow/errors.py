"""Exception hierarchy shared by every spikeflow module."""


class SpikeFlowError(Exception):
    """Base class for all library errors."""


class ContractError(SpikeFlowError, ValueError):
    """A precondition of an operation was violated."""


class ShapeError(ContractError):
    """Tensor extents are incompatible with the requested operation."""


class NumericError(SpikeFlowError, ArithmeticError):
    """A NaN or Inf was produced while strict mode is enabled."""


class FormatError(SpikeFlowError):
    """A file on disk does not follow the expected binary/text layout."""


class DataError(SpikeFlowError):
    """A well-formed file carries semantically invalid records."""


class CheckpointError(SpikeFlowError):
    """A checkpoint does not match the configuration it is loaded against."""
