class ConfigError(ValueError):
    """Invalid run or model configuration."""


class DataError(ValueError):
    """Malformed input data or split file."""


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss."""
