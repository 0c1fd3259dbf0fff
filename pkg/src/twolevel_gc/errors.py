class ConfigurationError(ValueError):
    """Shapes, channel counts or group settings that cannot work together."""


class ProtocolError(RuntimeError):
    """A simulated worker step was run out of phase order."""


class IngestionError(OSError):
    """A dataset file is missing, truncated or malformed."""


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
