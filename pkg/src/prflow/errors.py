"""Exception types shared across the package."""


class PrflowError(Exception):
    """Base class for all package errors."""


class ShapeError(PrflowError):
    """Input shape incompatible with an operation's contract."""


class FlowOverflowError(PrflowError):
    """Non-finite values appeared inside the flow (unstable scale outputs)."""


class EmptySampleError(PrflowError):
    """A masked sample has no observed pixels."""


class IdxFormatError(PrflowError):
    """Malformed IDX file."""


class CheckpointError(PrflowError):
    """Malformed or incompatible checkpoint file."""


class ConfigError(PrflowError):
    """Invalid configuration value or unknown key."""


class TrainingDivergedError(PrflowError):
    """Training produced non-finite losses and recovery retries were exhausted."""
