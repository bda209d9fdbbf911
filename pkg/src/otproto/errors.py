"""Exception hierarchy shared by every module.

Validation errors subclass ``ValueError`` so the estimator API and plain
function calls both surface bad inputs the way the wider ecosystem expects.
File-format errors form their own branch: readers must raise these (never
``struct.error`` or index errors) on corrupt input.
"""


class OTProtoError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(OTProtoError, ValueError):
    """Invalid argument, shape, or data contract violation."""


class NonFiniteError(ValidationError):
    """NaN or Inf encountered where finite values are required."""


class ZeroDimError(ValidationError):
    """An array dimension that must be >= 1 is zero."""


class DimMismatchError(ValidationError):
    """Shapes of two structures that must agree do not."""


class ZeroVectorError(ValidationError):
    """Feature vector norm below the floor; cosine similarity undefined."""


class EmptyDatasetError(ValidationError):
    """Training requires at least one sample."""


class SingleClassError(ValidationError):
    """AU-ROC needs at least one positive and one negative label."""


class NoRegionsError(ValidationError):
    """Region-overlap metrics need at least one ground-truth region."""


class NoNegativePixelsError(ValidationError):
    """FPR is undefined without any anomaly-free pixels."""


class MissingProvenanceError(ValidationError):
    """A prototype used by an assignment has no patch provenance."""


class ConfigError(ValidationError):
    """Bad configuration file, manifest, or command-line value."""


class NumericOverflowError(OTProtoError, ArithmeticError):
    """Kernel under/overflow in the direct (non-log) Sinkhorn path."""


class FormatError(OTProtoError):
    """Malformed or incompatible binary file."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class BadVersionError(FormatError):
    """File carries a format version this reader does not support."""


class TruncatedPayloadError(FormatError):
    """File shorter (or longer) than its header declares."""


class NonFiniteFloatError(FormatError):
    """Binary payload contains NaN or Inf."""


class InvalidHeaderError(FormatError):
    """Header fields are structurally valid but semantically impossible."""
