"""Open-distill: point cloud knowledge distillation with open set recognition"""

from src.entities import DatasetSplit, LabeledSample, PointCloud, Provenance
from src.losses import LossConfig
from src.models import Architecture, build_model
from src.pseudo_openset import MixConfig
from src.trainer import Regime, TrainConfig, train

__all__ = [
    "Architecture",
    "DatasetSplit",
    "LabeledSample",
    "LossConfig",
    "MixConfig",
    "PointCloud",
    "Provenance",
    "Regime",
    "TrainConfig",
    "build_model",
    "train",
]
