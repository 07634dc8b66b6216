"""Exception types shared across the package."""


class AdapterLabError(Exception):
    """Base class for every error raised deliberately by this package."""

    kind = "error"

    def to_record(self) -> dict:
        return {"error": self.kind, "type": type(self).__name__, "message": str(self)}


class DimensionError(AdapterLabError, ValueError):
    kind = "dimension"


class UsageError(AdapterLabError, RuntimeError):
    kind = "usage"


class DataError(AdapterLabError, ValueError):
    kind = "data"


class ConfigError(AdapterLabError, ValueError):
    kind = "config"


class SchemaError(AdapterLabError, ValueError):
    kind = "schema"


class TrainingError(AdapterLabError, RuntimeError):
    kind = "training"
