"""Mask-conditioned text-to-image diffusion at toy scale.

Learnable subject handles plus per-subject mask tokens condition a small
pixel-space UNet through cross-attention; see the README for the pipeline.
"""

from .diffusion import NoiseSchedule, add_noise, build_schedule, ddpm_step
from .generation import GenerationRequest, generate, segment_and_iou
from .model import MaskGenModel
from .training import TrainConfig, finetune, pretrain

__version__ = "0.1.0"

__all__ = [
    "NoiseSchedule",
    "build_schedule",
    "add_noise",
    "ddpm_step",
    "MaskGenModel",
    "TrainConfig",
    "pretrain",
    "finetune",
    "GenerationRequest",
    "generate",
    "segment_and_iou",
]
