"""Exception hierarchy shared by every stage of the pipeline."""


class ChlmapError(Exception):
    """Base class for all errors raised by chlmap."""


class FormatError(ChlmapError, ValueError):
    """A file does not follow the expected on-disk layout."""


class IntegrityError(ChlmapError, ValueError):
    """A file is structurally valid but internally inconsistent."""


class DomainError(ChlmapError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class GeometryError(ChlmapError, ValueError):
    """Malformed polygon geometry."""


class SchemaError(ChlmapError, ValueError):
    """Input table columns do not match the declared schema."""


class ParseError(ChlmapError, ValueError):
    """A field value could not be parsed."""


class ContractError(ChlmapError, ValueError):
    """Caller broke an interface contract (e.g. feature names mismatch)."""


class UndefinedMetricError(ChlmapError, ValueError):
    """A metric is undefined for the given input (e.g. R2 on constant y)."""


class TrainingDivergedError(ChlmapError, RuntimeError):
    """Iterative training blew up."""


class ConfigError(ChlmapError):
    """Invalid pipeline configuration."""


class MissingInputError(ChlmapError):
    """A pipeline stage could not find an artifact it depends on."""
