"""Exception types shared across the package."""


class FFDAError(Exception):
    """Base class for all package errors."""


class ShapeError(FFDAError, ValueError):
    pass


class ContractError(FFDAError, ValueError):
    """A documented precondition was violated."""


class SamplerError(FFDAError, ValueError):
    pass


class CheckpointError(FFDAError):
    """Checkpoint missing, malformed, or incompatible with the requested method."""


class ConfigError(FFDAError, ValueError):
    pass


class NumericError(FFDAError, FloatingPointError):
    """Non-finite values appeared during training or adaptation."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot
