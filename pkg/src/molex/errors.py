"""Exception types shared across the package."""


class MolexError(Exception):
    category = "error"


class ShapeError(MolexError, ValueError):
    """Operand shapes are incompatible for an operation."""

    category = "shape"


class GradientError(MolexError, RuntimeError):
    """``backward`` was called on something that cannot seed a gradient."""

    category = "gradient"


class NumericError(MolexError, ArithmeticError):
    """Non-finite values, or an iterative routine that failed to converge."""

    category = "numeric"


class ConfigError(MolexError, ValueError):
    """Contradictory or out-of-range configuration (e.g. K > N)."""

    category = "config"


class ContractError(MolexError, ValueError):
    """A precondition on the arguments does not hold."""

    category = "contract"


class FormatError(MolexError, ValueError):
    """A checkpoint or dataset file is corrupt, truncated, or of the wrong version."""

    category = "format"

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
