"""Semantic segmentation of aerial imagery aided by rasterised map layers."""
from .errors import (CorruptionError, DimensionError, FormatError, LabelError, MapFuseError,
                     NumericError, SamplingError, UsageError)
from .metrics import ConfusionMatrix, EvalReport, evaluate
from .models import ArchSpec, FuseNetMini, MiniSegNet, OSMNet, build_model
from .scenegen import SceneSpec, generate_scene, make_dataset
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "ConfusionMatrix", "CorruptionError", "DimensionError", "EvalReport",
    "FormatError", "FuseNetMini", "LabelError", "MapFuseError", "MiniSegNet", "NumericError",
    "OSMNet", "SamplingError", "SceneSpec", "TrainConfig", "UsageError", "build_model",
    "evaluate", "generate_scene", "make_dataset", "train",
]
