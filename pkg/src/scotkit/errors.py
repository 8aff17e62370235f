"""Exception hierarchy shared across the toolkit.

Every failure mode raised by library code derives from ScotError so callers
(and the command line front end) can map errors onto exit categories without
string matching.
"""

from __future__ import annotations


class ScotError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(ScotError):
    """Invalid or inconsistent configuration values."""


class DataError(ScotError):
    """Malformed input data or violated data invariants."""


class NumericError(ScotError):
    """Runtime numerical failure (non-finite values, degenerate vectors)."""


# --- tensor kernels ---------------------------------------------------------

class ZeroVectorError(NumericError):
    """Vector norm below the representable floor; cannot normalize."""


class DimMismatchError(DataError):
    """Operands disagree on vector dimensionality."""


class EmptyInputError(DataError):
    """Operation received an empty sequence where at least one element is required."""


class BadRangeError(ConfigError):
    """Numeric argument outside its documented range."""


# --- serialized artifacts ---------------------------------------------------

class IoError(ScotError):
    """Underlying file could not be read or written."""


class BadMagicError(DataError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(DataError):
    """File format version is not supported by this reader."""


class CorruptPayloadError(DataError):
    """File payload is truncated, oversized, or internally inconsistent."""


class NotNormalizedError(DataError):
    """Stored embedding row deviates from unit norm beyond repairable tolerance."""


class ParseError(DataError):
    """Text record could not be parsed."""


class InvariantViolationError(DataError):
    """A domain invariant on loaded or constructed data does not hold."""


class EmptyJoinError(DataError):
    """Joining input tables produced no usable records."""


# --- triplet generation -----------------------------------------------------

class NoRuleAppliesError(DataError):
    """No grammar rule matches the caption."""


class TransportError(ScotError):
    """Remote endpoint unreachable or persistently failing."""


class MalformedResponseError(DataError):
    """Remote endpoint replied with an unusable payload."""


# --- combiner network -------------------------------------------------------

class BadDimsError(ConfigError):
    """Requested network dimensions are invalid."""


class DegenerateOutputError(NumericError):
    """Pre-normalization output collapsed below the norm floor."""


class StaleCacheError(ScotError):
    """backward() received a cache not produced by forward() on these parameters."""


class ShapeMismatchError(DataError):
    """Loaded tensor shapes disagree with the expected dimensions."""


# --- training ----------------------------------------------------------------

class EmptyBatchError(DataError):
    """Batch has no examples."""


class EmptyDatasetError(DataError):
    """Training set has no examples."""


class NonFiniteLossError(NumericError):
    """Loss evaluated to NaN or infinity; training aborted."""


# --- evaluation --------------------------------------------------------------

class MissingGroundTruthError(DataError):
    """Query has no ground-truth target."""


class SubsetMissingTargetError(DataError):
    """Subset ranking requested but the target is not in the subset."""


class UnknownSubsetIdError(DataError):
    """Subset references an id absent from the gallery."""


class BadKError(ConfigError):
    """Requested cutoff K is outside [1, gallery size]."""


class BadSizesError(ConfigError):
    """Requested synthetic dataset sizes are inconsistent."""
