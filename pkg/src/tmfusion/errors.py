"""Exception types shared across the package."""


class TmfError(Exception):
    """Base class for all errors raised by tmfusion."""


class DimensionError(TmfError, ValueError):
    """Operand shapes do not agree."""


class DomainError(TmfError, ValueError):
    """A value lies outside the domain of an operation."""


class ContractError(TmfError, ValueError):
    """A documented precondition was violated."""


class ConfigError(TmfError, ValueError):
    """A configuration value is invalid."""


class FormatError(TmfError, ValueError):
    """A file does not match its declared binary or text format."""


class LoadError(TmfError, ValueError):
    """A dataset manifest could not be loaded."""
