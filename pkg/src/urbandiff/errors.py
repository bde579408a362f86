"""Exception hierarchy. ``category`` is what the CLI reports on failure."""


class UrbanDiffError(Exception):
    category = "error"


class ParameterError(UrbanDiffError, ValueError):
    category = "parameter"


class ShapeError(UrbanDiffError, ValueError):
    category = "shape"


class DomainError(UrbanDiffError, ValueError):
    category = "domain"


class StateError(UrbanDiffError, RuntimeError):
    category = "state"


class CompatibilityError(UrbanDiffError):
    category = "compatibility"


class FormatError(UrbanDiffError):
    category = "format"


class TrainingError(UrbanDiffError, RuntimeError):
    category = "training"


class GuidanceError(UrbanDiffError, RuntimeError):
    category = "guidance"


class GenerationError(UrbanDiffError, RuntimeError):
    category = "generation"


class MetricError(UrbanDiffError, ValueError):
    category = "metric"


class BaselineError(UrbanDiffError, ValueError):
    category = "baseline"


class ConfigError(UrbanDiffError, ValueError):
    category = "config"
