class DeepMIDEError(Exception):
    """Base class for package errors."""


class ConfigurationError(DeepMIDEError, ValueError):
    pass


class DataError(DeepMIDEError, ValueError):
    pass


class NumericalError(DeepMIDEError, ArithmeticError):
    pass


class NotFittedError(DeepMIDEError, AttributeError):
    pass
