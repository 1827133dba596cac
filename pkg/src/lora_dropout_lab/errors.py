"""Exception hierarchy shared across the lab."""


class LabError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(LabError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(LabError, ValueError):
    """A configuration value is missing, malformed or out of range."""


class ContractError(LabError, ValueError):
    """A function was called outside its documented preconditions."""


class NumericalError(LabError, ArithmeticError):
    """A computation produced non-finite values or failed a numerical check."""


class DivergenceError(NumericalError):
    """Training loss became non-finite or exceeded the divergence threshold."""

    def __init__(self, epoch, iteration, loss):
        self.epoch = epoch
        self.iteration = iteration
        self.loss = loss
        super().__init__(
            f"training diverged at epoch {epoch}, iteration {iteration} (loss={loss!r})"
        )


class ProbeError(NumericalError):
    """A stability probe could not establish the assumptions it measures under."""


class CheckpointError(LabError, ValueError):
    """A checkpoint does not match the model it is loaded into."""
