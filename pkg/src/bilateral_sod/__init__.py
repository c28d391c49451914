"""Bilateral CNN + transformer salient object detection with multi-head boosting, on a numpy autograd engine."""

from .decoder import PredictionSet, aggregate_inference, boosting_weight, select_branch
from .model import BilateralSOD, ModelConfig, ModelOutput

__version__ = "0.1.0"

__all__ = [
    "BilateralSOD", "ModelConfig", "ModelOutput", "PredictionSet", "aggregate_inference",
    "boosting_weight", "select_branch",
]
