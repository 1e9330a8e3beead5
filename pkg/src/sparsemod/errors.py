"""Exception types raised across the package."""


class SparseModError(Exception):
    """Base class for all package errors."""


class ConvergenceFailure(SparseModError):
    pass


class LengthMismatch(SparseModError, ValueError):
    pass


class InvalidToken(SparseModError, ValueError):
    pass


class SuffixLengthMismatch(SparseModError, ValueError):
    pass


class EmptyDataset(SparseModError, ValueError):
    pass


class EmptyProbeSet(SparseModError, ValueError):
    pass


class ClusterCollision(SparseModError):
    pass


class DegenerateXi(SparseModError):
    """Sentence embedding too close to zero for the projection matrix M."""

    def __init__(self, message, sample_index=None):
        super().__init__(message)
        self.sample_index = sample_index


class InvalidExpansion(SparseModError, ValueError):
    pass


class TooFewRows(SparseModError, ValueError):
    pass


class SchemaVersionMismatch(SparseModError):
    pass


class CorruptLine(SparseModError):
    def __init__(self, message, line_number):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class NumericFailure(SparseModError, FloatingPointError):
    """Non-finite loss or gradient during training, with position context."""

    def __init__(self, message, epoch=None, step=None):
        super().__init__(f"{message} (epoch={epoch}, step={step})")
        self.epoch = epoch
        self.step = step


class BoundViolation(SparseModError, AssertionError):
    """Gradient norm over q, V, W, U exceeded the bound constant times sqrt(error)."""
