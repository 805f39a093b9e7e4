"""Exception hierarchy shared by every module.

All failures raised on purpose derive from CmcrError so callers (and the
CLI) can catch one type.  Anything else escaping the library is a bug.
"""


class CmcrError(Exception):
    """Base class for all errors raised by this package."""


# ---------------------------------------------------------------- storage

class MagicMismatchError(CmcrError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(CmcrError):
    """File is shorter than its header declares."""


class NonFiniteValueError(CmcrError):
    """A matrix contains NaN or Inf; message carries row and column."""


class ZeroRowError(CmcrError):
    """A row with (near-)zero norm cannot be normalized."""


class DimMismatchError(CmcrError):
    """Embedding dimensions of two operands disagree."""


class ShapeMismatchError(CmcrError):
    """Row counts or array shapes of two operands disagree."""


class IoFailureError(CmcrError):
    """Underlying filesystem read or write failed."""


# ---------------------------------------------------------------- training

class BatchTooSmallError(CmcrError):
    """Training forward needs at least two rows for batch statistics."""


class CacheMismatchError(CmcrError):
    """Backward called with a cache not produced by the matching forward."""


class StepOutOfRangeError(CmcrError):
    """Schedule queried outside [0, total_steps]."""


class NonFiniteGradientError(CmcrError):
    """Optimizer received a gradient containing NaN or Inf."""


class NonFiniteLossError(CmcrError):
    """Loss evaluated to NaN or Inf during training."""


class ConfigInvalidError(CmcrError):
    """Configuration value out of range, or unknown key supplied."""


# ---------------------------------------------------------------- evaluation

class GtOutOfRangeError(CmcrError):
    """Ground-truth index points outside the gallery."""


class LabelOutOfRangeError(CmcrError):
    """Class label points outside the prototype set."""


class EmptyInputError(CmcrError):
    """Operation requires at least one record."""


class EmptyCandidatesError(CmcrError):
    """Candidate ranking requires a non-empty candidate set."""


class FractionInvalidError(CmcrError):
    """Split fraction must lie strictly between 0 and 1."""
