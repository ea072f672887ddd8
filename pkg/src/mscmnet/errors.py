"""Exception hierarchy.

Each error class maps to a process exit code used by the command line tool:
check failures exit 1, configuration errors 2, I/O and corruption errors 3,
numerical divergence 4, and format version mismatches 5.
"""


class MscmError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ShapeError(MscmError):
    """Operands have incompatible shapes or dtypes."""

    exit_code = 2


class ConfigError(MscmError):
    """Invalid configuration key, value, or combination."""

    exit_code = 2


class DataError(MscmError):
    """Missing, truncated, or corrupt data file."""

    exit_code = 3


class DivergenceError(MscmError):
    """Training produced a non-finite loss."""

    exit_code = 4

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class VersionError(MscmError):
    """On-disk format version is not supported by this build."""

    exit_code = 5
