"""Exception hierarchy shared across the package."""


class TemgnetError(Exception):
    """Base class for all package errors."""


class DimensionError(TemgnetError, ValueError):
    """Tensor or array shapes are incompatible."""


class NumericDomainError(TemgnetError, ValueError):
    """Input values fall outside the domain of an operation (NaN, Inf, |x| > 1, ...)."""


class ContractError(TemgnetError, ValueError):
    """A caller-side precondition was violated."""


class LengthError(ContractError):
    """A signal or recording is too short for the requested operation."""


class FilterSpecError(ContractError):
    """Invalid filter parameters."""


class DegenerateChannelError(NumericDomainError):
    """A channel has zero amplitude where a positive scale is required."""


class InsufficientDataError(ContractError):
    """Too few usable observations for a statistical test."""


class SchemaError(ContractError):
    """Imported arrays do not match the expected layout or value ranges."""


class FormatError(TemgnetError, ValueError):
    """A file on disk is malformed.

    Attributes:
        offset: byte offset at which the problem was detected, if known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(FormatError):
    """Artifact version or configuration does not match what the reader expects."""


class ConfigError(TemgnetError, ValueError):
    """Run configuration is invalid (unknown key, bad value, bad model id)."""
