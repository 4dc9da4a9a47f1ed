"""Exception hierarchy.

Every error carries a short machine-parsable ``category`` used by the CLI
when it reports a failure on a single line.
"""


class STCError(Exception):
    category = "error"


class ShapeError(STCError, ValueError):
    category = "shape"


class ConfigError(STCError, ValueError):
    category = "config"


class NumericError(STCError, ArithmeticError):
    category = "numeric"


class ContractError(STCError, RuntimeError):
    category = "contract"


class DataError(STCError, ValueError):
    category = "data"


class FormatError(STCError, ValueError):
    category = "format"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class FreezeViolation(STCError, RuntimeError):
    category = "freeze"


class CompatibilityError(STCError, ValueError):
    category = "compat"


class TemporalShapeError(ShapeError):
    """Feature map temporal depth differs from the depth SCB weights were built for."""


class LabelError(STCError, IndexError):
    category = "index"
