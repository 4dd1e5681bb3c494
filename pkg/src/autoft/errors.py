from __future__ import annotations


class AutoFTError(Exception):
    """Base class; ``category`` and ``exit_code`` drive the CLI error line."""

    category = "internal"
    exit_code = 1


class ShapeError(AutoFTError, ValueError):
    category = "shape"


class ParameterError(AutoFTError, ValueError):
    category = "parameter"


class ConfigError(AutoFTError):
    category = "config"
    exit_code = 2


class VocabMismatchError(ConfigError):
    category = "vocab-mismatch"
    exit_code = 4


class DataError(AutoFTError):
    category = "data"
    exit_code = 3


class SchemaError(DataError):
    category = "schema"


class MetricUndefinedError(AutoFTError, ValueError):
    category = "metric"
