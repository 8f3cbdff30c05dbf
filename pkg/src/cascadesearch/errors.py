"""Exception types shared across the package.

File-format and data problems raise subclasses of :class:`CascadeSearchError`
so callers (and the CLI, which maps them to exit code 2) can distinguish bad
input from programming mistakes.  Contract violations in function arguments
raise plain :class:`ValueError`.
"""


class CascadeSearchError(Exception):
    """Base class for every error this package raises on bad input."""


class FormatError(CascadeSearchError):
    """A file or payload does not conform to its declared format."""


class CorruptionError(FormatError):
    """A payload is truncated, has trailing garbage, or fails its checksum."""


class EmptyInputError(CascadeSearchError):
    """An input declares zero rows or zero dimensions."""


class DataError(CascadeSearchError):
    """Values are out of contract: non-finite components or zero vectors."""


class UniquenessError(CascadeSearchError):
    """A duplicate identifier appeared where ids must be unique."""


class HierarchyError(CascadeSearchError):
    """A product is mapped to more than one top-level category."""


class MismatchError(CascadeSearchError):
    """Catalog and embedding id sets disagree."""

    def __init__(self, message: str, missing_embeddings=(), missing_catalog=()):
        super().__init__(message)
        self.missing_embeddings = tuple(missing_embeddings)
        self.missing_catalog = tuple(missing_catalog)


class ConfigError(CascadeSearchError):
    """A configuration object fails its own validation rules."""


class TrainingError(CascadeSearchError):
    """Training data is degenerate (for example a single class)."""


class CoverageError(CascadeSearchError):
    """A router does not know every category present in the gallery."""

    def __init__(self, message: str, missing_labels=()):
        super().__init__(message)
        self.missing_labels = tuple(missing_labels)


class GroundTruthError(CascadeSearchError):
    """Query ground truth references a product the gallery does not hold."""


class IncomparableError(CascadeSearchError):
    """Two reports cannot be compared (different dataset or settings)."""


class MeasurementError(CascadeSearchError):
    """Timing measurement failed (non-monotonic clock or bad sample set)."""
