class DiagFusionError(Exception):
    """Base class for pipeline errors."""


class ConfigError(DiagFusionError):
    """Invalid configuration or command-line arguments."""


class DataError(DiagFusionError):
    """Malformed, inconsistent or missing telemetry / label data."""


class TrainingDivergence(DiagFusionError):
    """A training loss became non-finite."""


class ModelFormatError(DiagFusionError):
    """A saved model file is corrupt or has an unsupported version."""
