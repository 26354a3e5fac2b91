"""Exception taxonomy for the stochpool library."""


class StochPoolError(Exception):
    """Base class for all stochpool errors."""


class InvalidShapeError(StochPoolError, ValueError):
    """A tensor has the wrong rank, a non-positive dimension, or a mismatched shape."""


class InvalidProbabilityError(StochPoolError, ValueError):
    """A keep probability lies outside (0, 1]."""


class EmptySubsampleError(StochPoolError, ValueError):
    """floor(n * p) == 0: the subsample would keep nothing."""


class DegenerateInputError(StochPoolError, ValueError):
    """An estimator was asked for on an input too small to support it."""


class InvalidPatternError(StochPoolError, ValueError):
    """A spatial pattern violates a divisibility or cardinality precondition."""


class UnsupportedConfigurationError(StochPoolError, ValueError):
    """A pattern/probability combination the pattern family does not define."""


class InvalidPoolingError(StochPoolError, ValueError):
    """A pooling size does not divide the pooled extent."""


class InvalidInputError(StochPoolError, ValueError):
    """Input values violate an operator's domain (e.g. negative activations)."""


class InvalidConfigError(StochPoolError, ValueError):
    """A sweep or training configuration fails validation."""


class TrainingFailureError(StochPoolError, RuntimeError):
    """Training diverged (non-finite loss); carries the failing step index."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")
