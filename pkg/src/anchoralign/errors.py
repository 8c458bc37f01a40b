"""Exception types shared across the package."""


class AnchorAlignError(Exception):
    """Base class for all package errors."""


class DimensionError(AnchorAlignError):
    """Operand shapes violate an operation's shape rule."""


class TapeStateError(AnchorAlignError):
    """Tape used out of order (e.g. backward before forward)."""


class ContractError(AnchorAlignError):
    """A documented precondition was violated by the caller."""


class ConfigError(AnchorAlignError):
    """Invalid configuration value (e.g. non-positive temperature)."""


class DataError(AnchorAlignError):
    """Dataset violates a structural requirement (e.g. empty class)."""


class MissingClassError(DataError):
    """A class required to have samples has none."""


class DegenerateAnchorError(AnchorAlignError):
    """An anchor vector collapsed to zero, so cosine geometry is undefined."""


class FvecFormatError(AnchorAlignError):
    """A feature container file failed validation.

    ``field`` names the offending manifest field or blob property.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class TrainingDivergedError(AnchorAlignError):
    """Training loss became non-finite; ``iteration`` is where it happened."""

    def __init__(self, iteration: int, message: str = ""):
        detail = message or "loss is not finite"
        super().__init__(f"iteration {iteration}: {detail}")
        self.iteration = iteration
