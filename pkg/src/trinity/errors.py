"""Exception types shared across the package."""


class TrinityError(Exception):
    """Base class for all package errors."""


class ConfigError(TrinityError, ValueError):
    """A configuration value is out of its allowed range."""


class ContractError(TrinityError, ValueError):
    """An operation was called with inputs that violate its preconditions."""


class NumericError(TrinityError, ArithmeticError):
    """A non-finite value appeared in a forward or backward pass."""

    def __init__(self, message, layer=None, batch_index=None):
        super().__init__(message)
        self.layer = layer
        self.batch_index = batch_index


class UndefinedMetricError(TrinityError, ValueError):
    """A metric is undefined for the given labels/scores (e.g. single class)."""

    def __init__(self, message, n_positives=None, n_negatives=None):
        super().__init__(message)
        self.n_positives = n_positives
        self.n_negatives = n_negatives
