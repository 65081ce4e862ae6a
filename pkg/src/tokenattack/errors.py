"""Exception hierarchy shared across the package."""


class TokenAttackError(Exception):
    """Base class for all errors raised by tokenattack."""


class ShapeError(TokenAttackError, ValueError):
    pass


class ContractError(TokenAttackError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericalError(TokenAttackError, FloatingPointError):
    """A forward op produced NaN or Inf from finite inputs."""


class TrainingError(TokenAttackError, RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class FormatError(TokenAttackError, ValueError):
    """A binary file does not follow the expected layout."""


class TruncatedFileError(FormatError):
    pass


class ConsistencyError(FormatError):
    pass


class ConfigError(TokenAttackError, ValueError):
    pass
