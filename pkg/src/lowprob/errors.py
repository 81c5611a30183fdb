"""Exception types shared across the package."""


class LowProbError(Exception):
    """Base class for errors raised by this package."""


class InputError(LowProbError, ValueError):
    """Malformed or out-of-range input (token ids, lengths, probabilities)."""


class ConfigError(LowProbError, ValueError):
    """Invalid model spec, manifest, or run configuration."""


class NumericError(LowProbError, ArithmeticError):
    """Non-finite intermediate values or a failed factorization."""


class ConvergenceError(LowProbError, RuntimeError):
    """An iterative procedure exhausted its step cap."""
