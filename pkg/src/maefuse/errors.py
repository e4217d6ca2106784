"""Exception hierarchy shared by every subpackage."""


class MaefuseError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(MaefuseError, ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(MaefuseError, ValueError):
    """Invalid model or experiment configuration."""


class DataError(MaefuseError, ValueError):
    """Input data is missing, malformed, or insufficient."""


class NiftiError(DataError):
    """A byte stream could not be decoded as NIfTI-1."""


class NonFiniteError(MaefuseError, FloatingPointError):
    """A forward value, loss, or gradient became NaN or infinite."""


class CheckpointError(MaefuseError):
    """A checkpoint is corrupt or was written by an incompatible version."""
