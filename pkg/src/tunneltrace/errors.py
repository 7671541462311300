"""Exception types shared across the package."""


class TunneltraceError(Exception):
    """Base class for all package errors."""


class ConfigurationError(TunneltraceError):
    """A configuration value violates an invariant or a stability bound."""


class DataFormatError(TunneltraceError):
    """A data file or in-memory record does not match the expected schema."""


class IdentificationError(TunneltraceError):
    """Subspace identification could not produce a usable model."""


class AssemblyError(TunneltraceError):
    """Node models cannot be combined into a cascade."""


class EstimationError(TunneltraceError):
    """The horizon solver failed to produce an estimate."""
