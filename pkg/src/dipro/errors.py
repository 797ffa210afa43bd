"""Exception types shared across the package."""


class DiProError(Exception):
    """Base class for all package errors."""


class DimensionError(DiProError, ValueError):
    pass


class ContractError(DiProError, ValueError):
    """A precondition of an operation was violated."""


class LabelError(DiProError, ValueError):
    pass


class NumericError(DiProError, ArithmeticError):
    """NaN or non-finite values where finite values are required."""


class ParseError(DiProError, ValueError):
    pass


class UndefinedMetricError(DiProError, ValueError):
    """The metric is undefined for the given labels (e.g. a single class)."""
