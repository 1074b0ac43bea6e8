"""Exception hierarchy.

Every error raised on purpose by this package derives from TransccError so
callers can catch one base class at CLI boundaries.
"""


class TransccError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(TransccError):
    """Operands have shapes the operation cannot reconcile."""


class NotScalarError(TransccError):
    """backward() was called on a tensor with more than one element."""


class DetachedTensorError(TransccError):
    """backward() was called on a tensor that no tape recorded."""


class InvalidRateError(TransccError):
    """Dropout rate outside [0, 1)."""


class IndivisibleInputError(TransccError):
    """Spatial input size is not compatible with the patch/stem geometry."""


class TokenCountMismatchError(TransccError):
    """Token sequence length does not match the configured grid."""


class EmptyBoundaryError(TransccError):
    """A mask has no foreground, so boundary distances are undefined."""


class InvalidConfigError(TransccError):
    """Unknown, unparsable, or out-of-range configuration value."""


class MalformedPgmError(TransccError):
    """PGM payload does not parse (bad magic, header, or truncated data)."""


class MissingPairError(TransccError):
    """Manifest names an image or mask file that does not exist."""


class MissingGradientError(TransccError):
    """Optimizer stepped over a parameter that has no gradient."""


class NanLossError(TransccError):
    """Training loss became NaN."""


class EmptySplitError(TransccError):
    """Requested dataset split contains no samples."""


class BadCheckpointError(TransccError):
    """Checkpoint file is not readable as this package's format."""
