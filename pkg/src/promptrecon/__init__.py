"""Streaming two-view reconstruction with test-time visual prompt tuning."""

from .errors import (
    CheckpointError,
    ContractError,
    DataError,
    DegenerateGeometryError,
    DimensionError,
    EmptyMetricError,
    InsufficientHistoryError,
    PromptReconError,
    RenderError,
    TrainingDivergenceError,
)
from .geometry import Sim3, umeyama
from .predictor import ModelConfig, PredictionPair, Predictor, PromptSet

__version__ = "0.1.0"
