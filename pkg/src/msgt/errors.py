"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes or axes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value violates a structural constraint."""


class ContractError(ValueError):
    """An API precondition was violated by the caller."""


class PartitionError(ValueError):
    """Feature-map extents are not divisible by the window size; pad first."""


class FormatError(ValueError):
    """A serialized file (dataset or checkpoint) is malformed."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step
