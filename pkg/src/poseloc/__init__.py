"""Pose-conditioned multi-view, multimodal target localization on a synthetic
multi-sensor world."""

from .geometry import Arena, NodePose, encode_pose, local_to_world, world_to_local
from .model import VARIANTS, ModelSpec, assemble_model

__all__ = [
    "Arena",
    "ModelSpec",
    "NodePose",
    "VARIANTS",
    "assemble_model",
    "encode_pose",
    "local_to_world",
    "world_to_local",
]
__version__ = "0.1.0"
