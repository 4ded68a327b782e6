"""Exception types shared across the package."""


class DsgError(Exception):
    """Base class for all package errors."""


class MaskPresent(DsgError):
    """A mask token was found where a clean state is required."""


class EmptyBatch(DsgError):
    """An operation over a batch of graphs received zero graphs."""


class DegenerateVocab(DsgError):
    """A prior entry is exactly zero and smoothing was disabled."""


class OutOfRange(DsgError):
    """A timestep index falls outside [1, T]."""


class MaskMixNonzero(DsgError):
    """Stationary analysis queried on a schedule with a mask component."""


class UnreachableState(DsgError):
    """The observed noisy value has zero forward probability under every
    clean candidate with positive weight."""


class NoMaskedEntity(DsgError):
    """Completion was asked for a graph that carries no mask token."""


class AllZeroWeights(DsgError):
    """Resampling requested while every particle weight is zero."""


class ServiceUnavailable(DsgError):
    """The embedding service could not be reached."""


class MalformedResponse(DsgError):
    """The embedding service returned an unusable payload."""


class ParseError(DsgError):
    """A corpus line failed to parse.

    Carries the 1-based line number when raised by the loader.
    """

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class InvalidGraph(DsgError):
    """A loaded graph violates the scene-graph constraints."""

    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)


class InconsistentSpec(DsgError):
    """A synthetic-corpus specification is self-contradictory."""


class VersionMismatch(DsgError):
    """Checkpoint container version is not supported."""


class VocabHashMismatch(DsgError):
    """Checkpoint was trained against a different vocabulary."""


class CorruptFile(DsgError):
    """Checkpoint container is truncated or malformed."""


class DivergedLoss(DsgError):
    """Training loss became non-finite."""


class EmptySampleSet(DsgError):
    """A metric received an empty sample set."""


class SizeMismatch(DsgError):
    """Completion sets do not all have the declared sample count."""


class DegenerateBox(DsgError):
    """A bounding box has non-positive width or height."""


class UntrainedModel(DsgError):
    """Prediction requested from a trainable denoiser before any training."""
