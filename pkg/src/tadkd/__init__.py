"""Knowledge distillation for a miniature two-stage detector.

Everything runs on a small numpy reverse-mode autodiff engine
(:mod:`tadkd.tensor`) in 64-bit floats, so every loss can be gradient-checked.
"""

from .detector import DetectorConfig, DetectorModel, load_checkpoint, save_checkpoint
from .distill import DistillConfig
from .evaluation import EvalReport, average_precision, evaluate, infer
from .geometry import Box, MaskConfig
from .synth_data import SceneConfig, generate_scene, read_dataset, write_dataset
from .training import TrainConfig, train_detector

__version__ = "0.1.0"

__all__ = [
    "Box",
    "DetectorConfig",
    "DetectorModel",
    "DistillConfig",
    "EvalReport",
    "MaskConfig",
    "SceneConfig",
    "TrainConfig",
    "average_precision",
    "evaluate",
    "generate_scene",
    "infer",
    "load_checkpoint",
    "read_dataset",
    "save_checkpoint",
    "train_detector",
    "write_dataset",
]
