"""Exception hierarchy shared across the pipeline."""


class WeeeSortError(Exception):
    """Base class for every error raised by this package."""


class AnnotationError(WeeeSortError):
    """Annotation file is malformed or violates the schema."""


class GeometryError(WeeeSortError):
    """Degenerate or otherwise unusable geometry."""


class DataError(WeeeSortError):
    """Dataset inputs are missing, unreadable or inconsistent."""


class ManifestVersionError(DataError):
    pass


class ConfigError(WeeeSortError):
    """Invalid experiment, model or training configuration."""


class WeightsUnavailableError(ConfigError):
    """Pretrained backbone weights could not be loaded."""


class TrainingError(WeeeSortError):
    """Training aborted, e.g. on a non-finite loss."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


class UndefinedMetricError(WeeeSortError):
    """A metric has no defined value (zero denominator everywhere)."""
