"""Exception types shared across the pipeline.

Validation failures (bad files, bad configs, bad shapes) raise subclasses of
``ValidationError``; runtime failures during training raise subclasses of
``RuntimeFailure``. The CLI maps the former to exit code 2 and the latter to 3.
"""


class ValidationError(Exception):
    """Input, config, or shape violates a documented contract."""


class RuntimeFailure(Exception):
    """Operation started but could not finish (e.g. divergent training)."""


# -- file / corpus ingestion ------------------------------------------------

class MalformedFile(ValidationError):
    """File exists but header, shape, or encoding is wrong."""


class DurationMismatch(ValidationError):
    """Audio and motion durations disagree beyond the tolerance."""


class UnknownPieceId(ValidationError):
    """Split references a piece_id absent from the corpus."""


class OverlappingSplits(ValidationError):
    """A piece_id appears in more than one split list (or twice in one)."""


# -- annotations / labels ---------------------------------------------------

class SchemaError(ValidationError):
    """Annotation JSON does not match the documented schema."""


class OverlapError(ValidationError):
    """Two note events overlap in time."""


class RangeError(ValidationError):
    """Enum or class index outside its declared range."""


# -- sequences / shapes -----------------------------------------------------

class EmptySequence(ValidationError):
    """Sequence has zero frames where at least one is required."""


class EmptyTrainingSet(ValidationError):
    """Normalization stats requested over zero training samples."""


class EmptySplit(ValidationError):
    """Training requested with an empty train or validation split."""


class EmptyGroup(ValidationError):
    """Metric requested over an empty joint group."""


class TooShort(ValidationError):
    """Input shorter than the minimum the operation needs."""


class TooLong(ValidationError):
    """Input longer than the exhaustive oracle can enumerate."""


class DimensionMismatch(ValidationError):
    """Array shapes incompatible with the operation's contract."""


class ConfigError(ValidationError):
    """Configuration values violate an invariant."""


class PieceMismatch(ValidationError):
    """Prediction and ground-truth corpora cover different piece sets."""


class InvalidVariant(ValidationError):
    """Ablation variant not applicable to the requested training target."""


class DivergenceError(RuntimeFailure):
    """Training or validation loss became non-finite."""
