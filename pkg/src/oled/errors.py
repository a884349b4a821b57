class OledError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(OledError, ValueError):
    pass


class TapeError(OledError):
    """A backward pass was given a tape that does not belong to the stack."""


class ConfigError(OledError, ValueError):
    pass


class NonFiniteError(OledError, FloatingPointError):
    pass


class FormatError(OledError, ValueError):
    """Malformed or unsupported input file."""


class CheckpointError(OledError):
    pass
