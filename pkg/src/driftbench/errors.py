"""Exception hierarchy shared by all driftbench modules."""


class DriftbenchError(Exception):
    """Base class for errors raised by this package."""


class NumericError(DriftbenchError):
    """Numeric-domain violation: non-finite values, off-simplex inputs,
    or a solver generation with no usable candidates."""


class DataFormatError(DriftbenchError):
    """Malformed dataset/checkpoint file or out-of-contract payload."""


class UsageError(DriftbenchError):
    """Bad command line or configuration input."""
