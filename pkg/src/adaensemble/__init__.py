"""Sparse mixture of heterogeneous feature-interaction experts with learned early exit, for CTR prediction."""

from .model import AdaEnsembleModel, ModelConfig
from .training import BiLevelConfig, Dataset, bilevel_train, evaluate

__all__ = ["AdaEnsembleModel", "ModelConfig", "BiLevelConfig", "Dataset", "bilevel_train", "evaluate"]
__version__ = "0.1.0"
