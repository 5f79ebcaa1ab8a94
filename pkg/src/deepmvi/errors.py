"""Exception hierarchy shared across the package."""


class DeepMviError(Exception):
    """Base class for all package errors."""


class DimensionError(DeepMviError, ValueError):
    pass


class NumericalDomainError(DeepMviError, ArithmeticError):
    pass


class EmptyAttentionError(DeepMviError):
    """Raised when every attention candidate is masked."""


class DataFormatError(DeepMviError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class IntegrityError(DeepMviError, ValueError):
    pass


class UnprocessableSeriesError(DeepMviError, ValueError):
    def __init__(self, index, message="series has no available cells"):
        super().__init__(f"series {index}: {message}")
        self.index = index


class CapacityError(DeepMviError, ValueError):
    pass


class ConfigurationError(DeepMviError, ValueError):
    pass


class DegenerateInputError(DeepMviError):
    pass


class ScoringError(DeepMviError, ValueError):
    pass


class TrainingDivergedError(DeepMviError, FloatingPointError):
    def __init__(self, message, batch=None):
        super().__init__(message)
        self.batch = batch
