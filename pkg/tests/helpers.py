"""Small model and source fixtures shared by the unit tests."""

import numpy as np

from maskgen.dataio import toy_fixture
from maskgen.denoiser import DenoiserConfig
from maskgen.model import MaskGenModel
from maskgen.training import SourceImage

TINY16 = dict(image_size=16, base_channels=8, channel_multipliers=(1, 2), attention_resolutions=(8,),
              num_heads=2, cond_dim=8, time_embed_dim=16, aggregation_resolution=8)


def tiny_model(seed=0, **overrides):
    import torch

    torch.manual_seed(seed)
    cfg = DenoiserConfig(**{**TINY16, **overrides})
    return MaskGenModel(cfg, mask_grid=8, schedule_params={"T": 50, "beta_start": 1e-4, "beta_end": 0.02})


def tiny_source():
    return SourceImage.from_scene(toy_fixture(16))


def two_rect_source(size=16):
    img = np.full((3, size, size), -0.2, np.float32)
    m0 = np.zeros((size, size), np.uint8)
    m1 = np.zeros((size, size), np.uint8)
    m0[2:7, 2:9] = 1
    m1[9:14, 6:14] = 1
    img[:, m0.astype(bool)] = np.array([0.8, -0.7, -0.7], np.float32)[:, None]
    img[:, m1.astype(bool)] = np.array([-0.7, -0.7, 0.8], np.float32)[:, None]
    return SourceImage(img, {0: m0, 1: m1})
