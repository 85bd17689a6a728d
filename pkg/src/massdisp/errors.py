"""Exception types shared across the library."""


class MassDispError(ValueError):
    """Base class for all library errors."""


class ShapeError(MassDispError):
    """Field or parameter dimensions are inconsistent or invalid."""


class FormatError(MassDispError):
    """A serialized field file is malformed."""


class DomainError(MassDispError):
    """Input values fall outside the range an operation requires."""


class SizeError(MassDispError):
    """A problem instance exceeds the size an oracle is willing to handle."""


class ConfigError(MassDispError):
    """An experiment configuration is invalid."""
