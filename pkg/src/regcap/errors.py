"""Exception hierarchy shared by every subpackage."""


class RegcapError(Exception):
    """Base class for all errors raised by regcap."""


class ShapeError(RegcapError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(RegcapError, ValueError):
    """A configuration is invalid or internally inconsistent."""


class ContractError(RegcapError, ValueError):
    """A documented precondition of an operation was violated."""


class NumericError(RegcapError, ArithmeticError):
    pass


class TrainingError(NumericError):
    pass


class DataError(RegcapError):
    """Input data is missing, empty, or malformed."""


class LeakageError(DataError):
    """An article would be spread across more than one split."""

    def __init__(self, article_id, splits):
        self.article_id = article_id
        self.splits = sorted(splits)
        super().__init__(f"article {article_id!r} spans splits {self.splits}")


class LoadError(DataError):
    pass


class MetricError(RegcapError, ValueError):
    pass


class OracleScopeError(RegcapError):
    """An exhaustive oracle was asked to enumerate too large a space."""
