"""Exception taxonomy.

Every error carries a CLI exit code: 2 for configuration problems, 3 for data
problems, 4 for numeric failures. The command layer maps uncaught DeepBowError
to its exit_code; everything else is a crash (exit 1).
"""


class DeepBowError(Exception):
    exit_code = 1


class ConfigError(DeepBowError):
    exit_code = 2


class DataError(DeepBowError):
    exit_code = 3


class NumericError(DeepBowError):
    exit_code = 4


# --- dataio ---

class BadMagic(DataError):
    """File does not start with the DBV1 magic."""


class TruncatedFile(DataError):
    """Payload shorter than nx*ny*nz floats."""


class NonFinite(DataError):
    """NaN or Inf in a volume payload."""


class SchemaError(ConfigError):
    """Manifest JSON does not conform to the documented schema."""


class MissingVolume(DataError):
    """A referenced volume file is absent."""


class MetricMismatch(DataError):
    """Subject lacks a metric required by the metric config."""


class InvalidSpec(ConfigError):
    """Phantom spec violates its invariants."""


# --- patches ---

class EmptyResult(DataError):
    """No window meets the coverage threshold: mask too small."""


class OriginMismatch(DataError):
    """Per-metric patch sets are not aligned for stacking."""


class DegenerateChannel(DataError):
    """Channel standard deviation below 1e-12."""


# --- autoencoder ---

class InvalidArch(ConfigError):
    """Architecture descriptor violates its invariants."""


class ShapeMismatch(DataError):
    """Tensor shape incompatible with the model or operation."""


class EmptyPatchSet(DataError):
    """Training requires at least one patch."""


# --- vocabulary ---

class TooFewVectors(DataError):
    """Fewer distinct vectors than clusters requested."""


class DimMismatch(DataError):
    """Vector dimension differs from the codebook/model dimension."""


class EmptyRegion(DataError):
    """No feature vectors for a region that needs a histogram."""


# --- features ---

class ScopeMismatch(DataError):
    """Histogram scopes do not cover the metric config exactly."""


# --- learn ---

class SingleClass(DataError):
    """Training set contains only one class."""


class NoConvergence(NumericError):
    """Optimizer hit its pass limit. Models carry a flag instead of raising;
    this exception exists for strict-mode escalation."""


class EmptyGrid(ConfigError):
    """Hyperparameter grid contains no points."""


class BudgetExceedsFeatures(ConfigError):
    """Selection budget larger than the number of columns."""


# --- evaluation ---

class LengthMismatch(DataError):
    """Predictions and labels differ in length."""


class TooFewSamples(DataError):
    """Dataset too small for the requested heldout size."""


# --- cli ---

class UnreadableReport(DataError):
    """Report JSON missing or malformed."""
