class EyeshiftError(Exception):
    """Base class of every error raised on purpose by this package."""


class GeometryError(EyeshiftError, ValueError):
    """A mask rectangle or an image size violates the geometry contract."""


class ConfigError(EyeshiftError, ValueError):
    """Invalid configuration, or a checkpoint that does not match the requested architecture."""


class ValidationError(EyeshiftError, ValueError):
    """Face parameters outside the renderable range."""


class ModelError(EyeshiftError, RuntimeError):
    """A network returned something that breaks its shape contract."""


class IntegrityError(EyeshiftError, IOError):
    """A checkpoint or manifest on disk is corrupted or of an unknown format."""


class MetricError(EyeshiftError, ValueError):
    """Metric preconditions not met (inputs too small, too few samples, ...)."""


class TrainingError(EyeshiftError, RuntimeError):
    """Training diverged; the offending batch has been dumped next to the checkpoints."""
