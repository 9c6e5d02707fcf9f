"""Exception types shared across the package."""


class RadialRouterError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(RadialRouterError):
    """Tensor or array shapes do not conform."""


class ConfigError(RadialRouterError):
    """Invalid configuration value or combination."""


class ContractError(RadialRouterError):
    """An operation was called outside its protocol."""


class ValidationError(RadialRouterError):
    """Input values failed validation."""


class FormatError(RadialRouterError):
    """A file does not match its declared on-disk format."""


class IngestionError(RadialRouterError):
    """Dataset, embedding, or catalog ingestion failed."""


class CatalogMismatchError(RadialRouterError):
    """Checkpoint was trained against a different LLM catalog."""


class TrainingError(RadialRouterError):
    """Training aborted (repeated non-finite gradients or bad state)."""
