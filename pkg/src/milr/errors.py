"""Exception types shared across the package."""


class MilrError(Exception):
    """Base class for all package errors."""


class DimensionError(MilrError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class ConfigError(MilrError, ValueError):
    """A configuration value is outside its valid range."""


class ContractError(MilrError, RuntimeError):
    """An operation was called in a state that violates its preconditions."""


class NonFiniteError(MilrError, FloatingPointError):
    """An operation produced NaN or infinity."""


class EstimationError(MilrError, ArithmeticError):
    """An information estimate could not be computed."""


class TrainingError(MilrError, RuntimeError):
    """Training diverged."""


class SamplingError(MilrError, ValueError):
    """Not enough data to draw the requested episode."""


class GenerationError(MilrError, ValueError):
    """Synthetic data could not be generated with the requested geometry."""


class IngestionError(MilrError, OSError):
    """An input file or directory could not be read."""


class FormatError(MilrError, ValueError):
    """A binary file does not match the expected layout."""
