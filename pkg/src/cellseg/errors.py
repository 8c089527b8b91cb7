"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class CellSegError(Exception):
    """Base class for all package errors."""


class ConfigError(CellSegError):
    """Invalid configuration value or combination."""


class DataError(CellSegError):
    """Bad input data: unreadable files, shape mismatches, empty datasets."""


class DecodeError(DataError):
    """An image or mask file could not be decoded."""


class TilingError(DataError):
    """A tile plan cannot be built (patch larger than the image)."""


class CoverageError(DataError):
    """A stitch request leaves at least one pixel uncovered."""


class CheckpointError(DataError):
    """Checkpoint file is corrupt, truncated, or version-incompatible."""


class NumericalError(CellSegError):
    """Non-finite loss values or failed matrix factorizations."""


class NotReadyError(CellSegError):
    """Class queues do not yet hold enough entries to fit the Gaussians."""
