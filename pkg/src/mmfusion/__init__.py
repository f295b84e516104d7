"""Multimodal fusion of CNN, RNN and vision-transformer encoders on a numpy
reverse-mode autodiff core."""
from .data import DatasetSpec, MultimodalSample, generate, load_dataset, save_dataset
from .estimator import MultimodalClassifier, MultimodalScaler
from .fusion import BRANCHES, FUSION_MODES, ModelConfig, MultimodalModel
from .metrics import compare_baselines, compute_metrics, confusion, run_ablation
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BRANCHES",
    "FUSION_MODES",
    "DatasetSpec",
    "ModelConfig",
    "MultimodalClassifier",
    "MultimodalModel",
    "MultimodalSample",
    "MultimodalScaler",
    "TrainConfig",
    "compare_baselines",
    "compute_metrics",
    "confusion",
    "generate",
    "load_dataset",
    "run_ablation",
    "save_dataset",
    "train",
]
