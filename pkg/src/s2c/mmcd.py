"""Multimodal (optical vs SAR) variant.

Two independent encoders map the optical and SAR dates into a shared latent
space. The temporal triplet is anchored on the optical branch only, and the
spatial contrast compares the unaugmented latents of both modalities.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch

from .core import BinaryMask, LatentMap, MappingConfig, RasterImage, ShapeMismatch, TripletConfig, stack_images
from .encoder import EncoderSpec, LoRAConfig, Params, Siamese, apply_lora, reference_encoder
from .losses import BatchTooSmall, Latent, _nce_term, _same_shape, _stack, as_tensor, patch_cosine, similarity_matrix
from .mapping import binarize, change_prob_map


class DualEncoder(Siamese):
    def __init__(self, rgb: tuple[EncoderSpec, Params], sar: tuple[EncoderSpec, Params]):
        super().__init__({"rgb": rgb[0], "sar": sar[0]}, {"rgb": rgb[1], "sar": sar[1]})

    @classmethod
    def reference(cls, c: int, stride: int, rng: np.random.Generator, hidden: int = 64,
                  rgb_channels: int = 3, sar_channels: int = 1,
                  lora: Optional[LoRAConfig] = None, stage_norm: bool = False) -> "DualEncoder":
        rgb = reference_encoder(rgb_channels, c, stride, rng, hidden, stage_norm)
        if lora is not None:
            rgb = apply_lora(*rgb, lora, rng)
        sar = reference_encoder(sar_channels, c, stride, rng, hidden, stage_norm)
        return cls(rgb, sar)


def het_triplet(y_rgb: Latent, y_sar: Latent, bar_y_rgb: Latent,
                cfg: TripletConfig = TripletConfig()) -> torch.Tensor:
    """Optical-anchored triplet; batched inputs are averaged."""
    y_rgb, y_sar, bar_y_rgb = map(as_tensor, (y_rgb, y_sar, bar_y_rgb))
    _same_shape(y_rgb, y_sar, bar_y_rgb)
    return torch.relu(patch_cosine(y_rgb, y_sar) - patch_cosine(y_rgb, bar_y_rgb) + cfg.margin).mean()


def het_info_nce(Y_rgb: Sequence[Latent], Y_sar: Sequence[Latent]) -> torch.Tensor:
    Y_rgb, Y_sar = _stack(Y_rgb), _stack(Y_sar)
    _same_shape(Y_rgb, Y_sar)
    if Y_rgb.shape[0] < 2:
        raise BatchTooSmall(f"het_info_nce needs a batch of at least 2, got {Y_rgb.shape[0]}")
    return _nce_term(similarity_matrix(Y_rgb, Y_sar)) + _nce_term(similarity_matrix(Y_sar, Y_rgb))


def mmcd_infer(dual: Siamese, rgb: RasterImage, sar: RasterImage,
               mcfg: MappingConfig = MappingConfig(), thresh: float = 0.5) -> BinaryMask:
    """Change map between the two modalities, binarised without refinement."""
    if rgb.shape != sar.shape:
        raise ShapeMismatch(f"rgb {rgb.shape} and sar {sar.shape} are not co-registered")
    with torch.no_grad():
        y1 = dual.encode(1, stack_images([rgb]))[0]
        y2 = dual.encode(2, stack_images([sar]))[0]
    yc = change_prob_map(LatentMap(y1, dual.patch_stride), LatentMap(y2, dual.patch_stride), mcfg)
    return binarize(yc, thresh, rgb.shape)
