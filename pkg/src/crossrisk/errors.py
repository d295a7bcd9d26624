"""Exception types shared across the package.

Every error message names the offending shapes/paths so CLI output can point
at the failing module directly.
"""


class CrossRiskError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(CrossRiskError):
    """Operands have incompatible shapes; message names both shapes."""


class ChannelMismatchError(ShapeMismatchError):
    """Convolution input channels do not match the kernel."""


class FullyMaskedRowError(CrossRiskError):
    """A softmax row has no unmasked entry to normalize over."""


class NonScalarLossError(CrossRiskError):
    """backward() was handed a loss tensor that is not a scalar."""


class DivergentStateError(CrossRiskError):
    """A recurrent state exceeded the finite-magnitude guard."""


class AsymmetricSupportError(CrossRiskError):
    """A support matrix expected to be symmetric is not (tolerance 1e-9)."""


class NegativeEntryError(CrossRiskError):
    """A support matrix expected to be nonnegative has negative entries."""


class RankRangeError(CrossRiskError):
    """Requested factorization rank is outside [1, N]."""


class GridMapError(CrossRiskError):
    """Grid-node assignment is out of range or incomplete."""


class EmptyMaskError(CrossRiskError):
    """A validity mask has no valid cells, so the reduction is undefined."""


class MissingGradError(CrossRiskError):
    """Optimizer step is missing a gradient for a registered parameter."""


class SpanTooShortError(CrossRiskError):
    """A time series is too short for the requested alignment."""


class InsufficientLengthError(CrossRiskError):
    """A time series is too short to cut a single training window."""


class InsufficientHistoryError(CrossRiskError):
    """Not enough history to define the high-frequency period."""


class DivergenceError(CrossRiskError):
    """Training loss became non-finite."""


class ConfigError(CrossRiskError):
    """Invalid run configuration (dims, levels, paths)."""
