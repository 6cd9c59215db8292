"""Exception types shared across the package.

Each class maps to one failure mode named in the module contracts; the CLI
maps a few of them onto process exit codes.
"""


class SgdThermoError(Exception):
    """Base class for all package errors."""


class InvalidArgument(SgdThermoError, ValueError):
    pass


class FormatError(SgdThermoError):
    """A data file does not have the expected binary layout."""


class InconsistentData(SgdThermoError):
    pass


class CapabilityError(SgdThermoError):
    """The requested quantity is unavailable for this model at this scale."""


class Diverged(SgdThermoError):
    pass


class OracleLimit(SgdThermoError):
    """An exhaustive-enumeration oracle was asked for an instance too large to enumerate."""


class NoMinimum(SgdThermoError):
    pass


class NotAMinimum(SgdThermoError):
    """The supplied Hessian is not positive definite."""


class CorrectionTooLarge(SgdThermoError):
    pass


class InsufficientData(SgdThermoError):
    pass
