"""Exception hierarchy shared by every HEWNN module."""

from typing import Optional


class HEWNNError(Exception):
    """Base class for all errors raised by HEWNN."""


class ConfigError(HEWNNError, ValueError):
    pass


class ContractViolationError(HEWNNError, ValueError):
    """An operation was called with arguments outside its contract."""


class ShapeError(ContractViolationError):
    pass


# --- CKKS ------------------------------------------------------------------


class CapacityError(HEWNNError, ValueError):
    """More values than slots."""


class EncodingRangeError(HEWNNError, ValueError):
    """Scaled value does not fit the active modulus."""


class LevelError(HEWNNError, ValueError):
    pass


class DepthBudgetError(HEWNNError):
    """The circuit needs more levels than the modulus chain provides."""

    def __init__(self, message: str, required_depth: Optional[int] = None, stage: Optional[str] = None):
        super().__init__(message)
        self.required_depth = required_depth
        self.stage = stage


class AlignmentError(HEWNNError, ValueError):
    """Operands differ in level or scale."""


class RelinearizationRequiredError(HEWNNError, ValueError):
    pass


class CorruptionError(HEWNNError, ValueError):
    pass


class FormatError(HEWNNError, ValueError):
    pass


class ContextMismatchError(HEWNNError, ValueError):
    pass


# --- Data ------------------------------------------------------------------


class DataLoadError(HEWNNError, ValueError):
    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column '{column}'")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)
        self.row = row
        self.column = column


class BalanceError(HEWNNError, ValueError):
    pass


class SplitError(HEWNNError, ValueError):
    pass


class UndefinedAucError(HEWNNError, ValueError):
    pass
