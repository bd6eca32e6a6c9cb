"""Exception types shared across the package."""


class KernelGAError(Exception):
    """Base class for all package errors."""


class ConfigError(KernelGAError, ValueError):
    """Invalid configuration value or combination."""


class ShapeError(KernelGAError, ValueError):
    """Tensor shapes do not fit the operation."""


class InfeasibleArchitectureError(ShapeError):
    """A decoded layer would have a spatial side smaller than its minimum."""


class NumericError(KernelGAError, ArithmeticError):
    """A non-finite value appeared in a tensor."""


class StateError(KernelGAError, RuntimeError):
    """Operation called on an object in the wrong state."""


class DataFormatError(KernelGAError, ValueError):
    """Malformed dataset file. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} at offset {offset}"
        super().__init__(message)
        self.offset = offset


class DegenerateInputError(KernelGAError, ValueError):
    """Image has no foreground after binarization."""


class EvaluationError(KernelGAError, RuntimeError):
    """Fitness evaluation failed; carries the genome and any partial report."""

    def __init__(self, message, genome=None, report=None):
        super().__init__(message)
        self.genome = genome
        self.report = report
