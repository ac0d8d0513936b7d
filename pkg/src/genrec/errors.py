class ConfigurationError(ValueError):
    """Bad shapes, bad hyperparameters, or inconsistent configuration."""


class DataError(ValueError):
    """Input data is empty, malformed, or inconsistent."""


class NumericalError(ArithmeticError):
    """A loss or gradient went non-finite."""

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where
