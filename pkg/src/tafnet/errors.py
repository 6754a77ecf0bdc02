"""Exception hierarchy shared by all tafnet modules."""


class TafnetError(Exception):
    """Base class for all package errors."""


class FormatError(TafnetError):
    """Binary file header/payload does not match the expected format."""


class DataError(TafnetError):
    """Data violates an invariant (NaN payload, empty dataset, bad range)."""


class SchemaError(TafnetError):
    """Manifest row or header violates the cohort schema."""


class ShapeError(TafnetError):
    """Array shapes are inconsistent with the operation's contract."""


class ParamError(TafnetError):
    """A parameter value is outside its documented domain."""


class ConfigError(TafnetError):
    """Unknown or malformed configuration key/value."""


class DegenerateIntensityError(DataError):
    """Brain voxels have zero intensity spread; normalization undefined."""


class MetricUndefinedError(TafnetError):
    """Metric requires both classes / positive samples that are absent."""


class TestUndefinedError(TafnetError):
    """Statistical test degenerate (e.g. all paired differences zero)."""


class CorrelationUndefinedError(TafnetError):
    """Correlation undefined (constant vector or too few samples)."""


class StateError(TafnetError):
    """Operation requires a trained/initialized model state."""


class IoError(TafnetError):
    """Missing or unreadable artifact file."""


class DependencyError(TafnetError):
    """A pipeline stage was run before the stage it depends on."""

    def __init__(self, stage: str, required: str):
        self.stage = stage
        self.required = required
        super().__init__(
            f"stage '{stage}' requires artifacts from stage '{required}'; "
            f"run '{required}' first"
        )
