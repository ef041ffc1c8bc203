"""Exception taxonomy shared by every module."""


class GazeEngineError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(GazeEngineError, ValueError):
    """A tensor shape does not satisfy an operation's contract.

    ``axis`` names the offending axis when one can be singled out.
    """

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class ContractError(GazeEngineError, ValueError):
    """A precondition of an operation was violated."""


class ConfigurationError(GazeEngineError, ValueError):
    """An infeasible or inconsistent configuration."""


class UnknownDeviceError(ConfigurationError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown device"


class NonFiniteLossError(GazeEngineError, FloatingPointError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class FormatError(GazeEngineError):
    """Base class for malformed container files."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class UnsupportedDtypeError(FormatError):
    pass


class DuplicateEntryError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    """A stored tensor disagrees with the expected architecture."""
