"""Skeleton-based fall detection: data handling, graph model, training and evaluation."""
from .errors import SdfaError
from .model import ModelConfig, SdfaModel, build_model, forward, load_checkpoint, predict_proba, save_checkpoint
from .skeleton_data import SequenceMeta, SkeletonSequence, load_dataset, prepare_batch, save_dataset
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "SdfaError", "SdfaModel", "SequenceMeta", "SkeletonSequence", "TrainConfig",
    "build_model", "evaluate", "forward", "load_checkpoint", "load_dataset", "predict_proba",
    "prepare_batch", "save_checkpoint", "save_dataset", "train",
]
