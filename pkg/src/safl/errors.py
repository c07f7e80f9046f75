"""Exception types shared across the package.

The CLI maps these onto exit codes: config errors exit 2, data errors
exit 3, divergence exits 4.
"""

from __future__ import annotations


class DimensionError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    """Raised when an iterate becomes non-finite or leaves the 1e12 ball.

    ``last_state`` holds the last finite model and ``records`` whatever was
    logged before the abort.
    """

    def __init__(self, message, *, last_state=None, round_index=None, records=None):
        super().__init__(message)
        self.last_state = last_state
        self.round_index = round_index
        self.records = records if records is not None else []
