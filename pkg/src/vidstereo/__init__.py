"""Temporally consistent disparity estimation for rectified stereo video."""

from .config import ModelConfig, PipelineConfig, TrainConfig
from .pipeline import StereoVideoModel, infer, infer_sequence
from .synthdata import SceneConfig, generate_sequence

__all__ = [
    "ModelConfig", "PipelineConfig", "TrainConfig",
    "StereoVideoModel", "infer", "infer_sequence",
    "SceneConfig", "generate_sequence",
]
__version__ = "0.1.0"
