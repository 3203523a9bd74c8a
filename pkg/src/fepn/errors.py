"""Exception types shared across the package."""


class FEPNError(Exception):
    """Base class for all package errors."""


class DomainError(FEPNError, ValueError):
    """An argument lies outside the domain of the operation."""


class ShapeError(FEPNError, ValueError):
    """Array dimensions do not agree."""


class DegenerateInputError(FEPNError, ValueError):
    """Input is valid in type but carries no usable information
    (single-class labels, all-zero densities, ...)."""


class TrainingError(FEPNError, RuntimeError):
    """Optimization produced a non-finite loss."""

    def __init__(self, message, step=None, term=None):
        super().__init__(message)
        self.step = step
        self.term = term


class CheckpointError(FEPNError, ValueError):
    """A checkpoint file is missing, truncated or of an unknown format."""
