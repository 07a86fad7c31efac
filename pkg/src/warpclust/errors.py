"""Exception taxonomy shared by all warpclust modules."""

from __future__ import annotations


class WarpclustError(Exception):
    """Base class for every error raised by this package."""


class StructuralError(WarpclustError):
    """Shape, channel, or contract violation in a tensor pipeline."""


class ConfigError(WarpclustError):
    """Invalid or inconsistent configuration value."""


class DataFormatError(WarpclustError):
    """Malformed input table; message carries the offending line number."""


class NumericalError(WarpclustError):
    """Non-finite values or numerically unstable intermediate state."""


class DegenerateFlowError(NumericalError):
    """Flow displacement too small to normalize into a warp."""


class EmptyClusterError(WarpclustError):
    """A cluster received (numerically) zero total soft mass."""


class DegenerateMetricError(WarpclustError):
    """A metric denominator collapsed (coincident means, zero entropy)."""


class NormalizationError(WarpclustError):
    """Per-curve normalization impossible (zero variance)."""


class ImputationError(WarpclustError):
    """Too few observed samples to fit the imputation basis."""
