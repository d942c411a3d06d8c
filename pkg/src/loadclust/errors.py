"""Exception hierarchy.

Everything raised on bad data or bad configuration derives from
``LoadClustError`` so the CLI can map it to a "data error" exit code;
genuine bugs surface as ordinary exceptions.
"""


class LoadClustError(Exception):
    """Base class for all recoverable pipeline errors."""


class IngestError(LoadClustError):
    pass


class PreprocessError(LoadClustError):
    pass


class FeatureError(LoadClustError):
    pass


class MatrixError(LoadClustError):
    pass


class ClusterError(LoadClustError):
    pass


class EvaluateError(LoadClustError):
    pass


class TreeError(LoadClustError):
    pass


class ConfigError(LoadClustError):
    pass
