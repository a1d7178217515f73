"""Few-shot counting by detection with multi-scale dense queries."""

from .geometry import Box, DetectionSet, decode_tlrb, encode_tlrb, iou, local_maxima, nms
from .model import CountingModel, ModelConfig, load_checkpoint, save_checkpoint
from .synth import GeneratorConfig, SceneAnnotation, generate_scene, preset_config

__all__ = [
    "Box",
    "DetectionSet",
    "CountingModel",
    "ModelConfig",
    "GeneratorConfig",
    "SceneAnnotation",
    "decode_tlrb",
    "encode_tlrb",
    "generate_scene",
    "iou",
    "load_checkpoint",
    "local_maxima",
    "nms",
    "preset_config",
    "save_checkpoint",
]

__version__ = "0.1.0"
