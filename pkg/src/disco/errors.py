"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes of the operands do not fit the operation."""


class LabelError(ValueError):
    """A label matrix row is not a valid one-hot encoding."""


class ContractViolationError(ValueError):
    """An input violates a documented precondition (e.g. negative scores)."""


class DegenerateInputError(ValueError):
    """Input carries no usable signal (all-zero scores, empty batch)."""


class UsageError(RuntimeError):
    """API misuse, e.g. backward on a non-scalar or a consumed graph."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataFormatError(ValueError):
    """A data file does not match its documented binary or text layout."""


class NumericalAbortError(RuntimeError):
    """Training hit a non-finite loss value.

    Carries where it happened so a run can be diagnosed from the exit
    message alone.
    """

    def __init__(self, epoch: int, step: int, term: str):
        self.epoch = epoch
        self.step = step
        self.term = term
        super().__init__(
            f"non-finite value in {term} at epoch {epoch}, step {step}"
        )
