"""Exception hierarchy shared across the package."""


class LeuqError(Exception):
    """Base class for all errors raised by leuq."""


class ConfigError(LeuqError, ValueError):
    """Invalid configuration, shape or extent."""


class DimensionError(ConfigError):
    """Operand shapes are incompatible."""


class ContractError(LeuqError, RuntimeError):
    """An operation was called outside of its contract."""


class NumericError(LeuqError, ArithmeticError):
    """A NaN or Inf was produced."""


class StabilityError(NumericError):
    """The PDE solver detected a CFL violation."""


class FormatError(LeuqError, IOError):
    """A file on disk is malformed, truncated, or corrupted."""


class VersionError(FormatError):
    """A file carries an unsupported format version."""


class ChecksumError(FormatError):
    """Payload checksum does not match the header."""


class TrainingDiverged(NumericError):
    """Training loss exceeded the divergence threshold or became NaN."""

    def __init__(self, message: str, epoch: int, member: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.member = member


class InversionError(NumericError):
    """Inverse optimization produced a non-finite objective."""

    def __init__(self, message: str, iteration: int, member: int | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.member = member


class DegenerateTargetError(LeuqError, ValueError):
    """A relative metric was requested against an all-zero target."""
