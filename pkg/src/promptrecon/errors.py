"""Exception hierarchy shared across the package."""


class PromptReconError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class DimensionError(PromptReconError, ValueError):
    """Operand shapes are incompatible."""

    exit_code = 2


class ContractError(PromptReconError, ValueError):
    """A call violated an operation precondition."""


class DataError(PromptReconError, ValueError):
    """Input data is malformed, non-finite, or missing."""

    exit_code = 2


class DegenerateGeometryError(PromptReconError, ArithmeticError):
    """Point configuration does not determine a unique similarity transform."""

    exit_code = 3


class InsufficientHistoryError(PromptReconError, LookupError):
    """Not enough historical keyframes to draw a sample pair."""


class TrainingDivergenceError(PromptReconError, ArithmeticError):
    """A loss became non-finite during optimisation."""

    exit_code = 3


class RenderError(PromptReconError, ValueError):
    """A camera pose does not see enough of the scene."""

    exit_code = 2


class EmptyMetricError(PromptReconError, ValueError):
    """Every correspondence was discarded by the outlier threshold."""

    exit_code = 2


class CheckpointError(PromptReconError, ValueError):
    """Checkpoint file is unreadable or incompatible with the model config."""

    exit_code = 2
