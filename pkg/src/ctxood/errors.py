"""Exception hierarchy for the engine.

Every error raised by the library derives from CtxoodError so the CLI can
map library failures to a single data-error exit code.
"""


class CtxoodError(Exception):
    """Base class for all library errors."""


class ZeroVectorError(CtxoodError):
    """A vector with (near-)zero norm cannot be normalized."""


class DimensionMismatchError(CtxoodError):
    """Operands have incompatible vector dimensions."""


class InvalidSpecError(CtxoodError):
    """A generator or configuration value is out of its legal range."""


class InvalidPositionError(CtxoodError):
    """A word position lies outside the context length."""


class UnknownDonorError(CtxoodError):
    """A swap perturbation references a category with no context."""


class TooFewPointsError(CtxoodError):
    """An operation needs more points than the category provides."""


class EmptyBatchError(CtxoodError):
    """A loss was asked to average over an empty batch."""


class EmptySetError(CtxoodError):
    """A metric was asked to evaluate an empty score set."""


class LengthMismatchError(CtxoodError):
    """Paired sequences differ in length."""


class ShapeMismatchError(CtxoodError):
    """Array shapes disagree with the model geometry."""


class EncoderMismatchError(CtxoodError):
    """Models being merged do not share one frozen encoder."""


class BadMagicError(CtxoodError):
    """A file does not start with the expected magic bytes."""


class VersionUnsupportedError(CtxoodError):
    """A file declares a format version this build cannot read."""


class TruncatedFileError(CtxoodError):
    """A file's byte length disagrees with its declared contents."""


class LabelOutOfRangeError(CtxoodError):
    """A label is neither the unlabeled sentinel nor a valid category."""


class InvalidConfigError(CtxoodError):
    """A config file contains an unknown key or an unparseable value."""
