"""Exception types shared across the toolkit."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class ConfigError(ValueError):
    """Invalid configuration value."""


class OOVError(IndexError):
    """A symbol id is outside the vocabulary."""


class FormatError(ValueError):
    """A binary or text file is malformed."""


class CheckpointError(FormatError):
    """A checkpoint cannot be loaded into the requested model."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""
