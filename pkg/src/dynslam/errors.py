"""Exception hierarchy shared by all modules.

Exit-code mapping used by the CLI: config/usage problems -> 2, broken or
missing data files -> 3, numerical failures -> 4.
"""


class DynSlamError(Exception):
    exit_code = 1


class ConfigError(DynSlamError):
    """Invalid configuration values or malformed config files."""

    exit_code = 2


class SceneSpecError(ConfigError):
    """Synthetic scene specification violates its own constraints."""


class DataError(DynSlamError):
    """Problems with input data files."""

    exit_code = 3


class IngestError(DataError):
    """Dataset directory is missing required index files."""


class FormatError(DataError):
    """A data file does not match its declared binary/text layout."""


class EmptySequenceError(DataError):
    """Association produced no usable frames."""


class InsufficientDataError(DataError):
    """Too few samples for the requested estimation."""


class NumericalError(DynSlamError):
    exit_code = 4


class DegenerateGeometryError(NumericalError):
    """Point configuration does not constrain the model (e.g. collinear)."""


class DegenerateLineError(NumericalError):
    """Epipolar line has vanishing direction coefficients."""


class EmptyEdgeMapError(NumericalError):
    """Distance transform requested on a map with no edge pixels."""
