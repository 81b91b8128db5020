"""Exception types shared across the package."""


class MixSKDError(Exception):
    pass


class InvalidShapeError(MixSKDError, ValueError):
    """Tensor extents do not fit the operation."""


class InvalidConfigError(MixSKDError, ValueError):
    """A hyperparameter or structural setting is out of its valid range."""


class EvaluationError(MixSKDError, ArithmeticError):
    """A numeric evaluation produced NaN or otherwise cannot proceed."""


class FormatError(MixSKDError, ValueError):
    """A file on disk does not match the expected binary/text layout."""
