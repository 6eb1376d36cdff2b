"""Exception hierarchy shared by all lsef components."""


class LsefError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(LsefError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigurationError(LsefError):
    """A configuration value is invalid (kernel sizes, groups, toggles...)."""


class UsageError(LsefError):
    """An API was called in an unsupported way (e.g. backward on a non-scalar)."""


class DataError(LsefError):
    """Dataset or label content is invalid, or an I/O path is unusable."""


class NumericalError(LsefError):
    """A numerical routine failed (non-convergence, non-finite values)."""


class OptimizerError(NumericalError):
    """An optimizer step hit a non-finite loss; carries phase diagnostics."""

    def __init__(self, message, phase=None, report=None):
        super().__init__(message)
        self.phase = phase
        self.report = report


class ResourceError(LsefError):
    """An input exceeds a configured resource cap."""
