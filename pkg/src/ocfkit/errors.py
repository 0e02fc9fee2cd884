"""Exception types shared across the toolkit.

Everything deriving from :class:`OcfError` is an input/format problem and
maps to CLI exit code 2; :class:`InternalError` marks a broken invariant
inside the library itself and maps to exit code 3.
"""


class OcfError(Exception):
    """Base class for all user-facing toolkit errors."""


class FormatError(OcfError):
    """A file or directory does not match the expected layout."""


class ConsistencyError(OcfError):
    """Structurally valid input whose parts disagree with each other."""


class DataError(OcfError):
    """Payload values violate an invariant (e.g. non-finite coordinates)."""


class IoError(OcfError):
    """Filesystem read or write failure."""


class RangeError(OcfError):
    """A requested frame or window is outside the available sequence."""


class ConfigError(OcfError):
    """Invalid configuration value or combination."""


class CorruptionError(OcfError):
    """A binary payload fails validation on read."""


class ShapeError(OcfError):
    """Mismatched grid specs or array shapes."""


class InternalError(Exception):
    """Invariant violation inside the library; not an input problem."""
