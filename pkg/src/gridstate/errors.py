"""Exception types shared across the package."""


class GridStateError(Exception):
    """Base class for all package errors."""


class CaseFormatError(GridStateError, ValueError):
    """Malformed case, partition, plan or scenario text."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CaseValidationError(GridStateError, ValueError):
    """A parsed network case violates a structural invariant."""

    def __init__(self, message, entity=None):
        self.entity = entity
        super().__init__(message)


class PartitionError(GridStateError, ValueError):
    pass


class ObservabilityError(GridStateError):
    """Measurement set does not determine the state (Jacobian rank < n)."""

    def __init__(self, message, rank=None, n=None):
        self.rank = rank
        self.n = n
        super().__init__(message)


class SingularGainError(GridStateError):
    def __init__(self, message, rank=None):
        self.rank = rank
        super().__init__(message)


class DecompositionError(GridStateError, ValueError):
    pass


class ConfigError(GridStateError, ValueError):
    pass
