"""Exception hierarchy shared by every mbhx module."""


class MBHXError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(MBHXError, ValueError):
    """An operation was called with arguments outside its contract."""


class ConfigError(MBHXError, ValueError):
    """A configuration object violates one of its invariants."""


class NumericError(MBHXError, ArithmeticError):
    """A non-finite value appeared where only finite values are allowed."""


class FormatError(MBHXError):
    """A file is not in the expected format."""


class CorruptionError(FormatError):
    """A checksum did not match."""


class VersionError(FormatError):
    """A file was written by an incompatible format version."""


class RejectedSample(MBHXError):
    """A synthesized sprite does not fit within the image guard band."""
