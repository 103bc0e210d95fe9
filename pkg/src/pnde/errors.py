"""Exception types shared across the library."""


class PndeError(Exception):
    """Base class for all library errors."""


class ShapeError(PndeError, ValueError):
    """Operands have incompatible or invalid dimensions."""


class SingularMatrixError(PndeError):
    """A Cholesky factorization hit a nonpositive (or rank-deficient) pivot."""

    def __init__(self, message, pivot_index, pivot_value):
        super().__init__(message)
        self.pivot_index = pivot_index
        self.pivot_value = pivot_value


class NonConvergenceError(PndeError):
    """An iterative scheme exhausted its iteration budget."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class DivergenceError(PndeError):
    """A fixed-step integration or training step produced non-finite values."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class StiffnessError(PndeError):
    """The adaptive solver could not advance (step underflow or budget hit)."""

    def __init__(self, message, stats=None):
        super().__init__(message)
        self.stats = stats


class FormatError(PndeError):
    """A file did not match its expected binary or text layout."""


class ConfigError(PndeError):
    """Invalid or inconsistent run configuration."""


class TrainingError(PndeError):
    """Training diverged."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class MetricError(PndeError):
    """A metric is undefined for the given inputs (e.g. zero reference norm)."""
