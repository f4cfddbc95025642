"""Domain types shared across the change-detection pipeline.

All types are frozen dataclasses that validate their invariants on
construction. Image-like grids are numpy arrays; latent feature grids are
torch tensors so they can carry gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch


class S2CError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(S2CError, ValueError):
    pass


class ValueRange(S2CError, ValueError):
    pass


class ConfigError(S2CError, ValueError):
    pass


MIN_IMAGE_SIDE = 32


@dataclass(frozen=True, eq=False)
class RasterImage:
    """A single co-registered observation, H x W x C with values in [0, 1]."""

    pixels: np.ndarray
    resolution_m: Optional[float] = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ShapeMismatch(f"expected H x W x C with C in (1, 3), got {px.shape}")
        if px.shape[0] < MIN_IMAGE_SIDE or px.shape[1] < MIN_IMAGE_SIDE:
            raise ShapeMismatch(f"image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {px.shape[:2]}")
        if not np.all(np.isfinite(px)):
            raise ValueRange("image contains non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueRange("image values must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @classmethod
    def from_uint8(cls, arr: np.ndarray, resolution_m: Optional[float] = None) -> "RasterImage":
        return cls(np.asarray(arr, dtype=np.float64) / 255.0, resolution_m)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2:
            raise ShapeMismatch(f"mask must be 2-D, got {b.shape}")
        b = b.astype(bool)
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other):
        return isinstance(other, BinaryMask) and np.array_equal(self.bits, other.bits)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ImagePair:
    """Bi-temporal pair. ``label`` is for evaluation only and never used in training."""

    t1: RasterImage
    t2: RasterImage
    label: Optional[BinaryMask] = None

    def __post_init__(self):
        if self.t1.shape != self.t2.shape:
            raise ShapeMismatch(f"t1 {self.t1.shape} and t2 {self.t2.shape} differ")
        if self.label is not None and self.label.shape != self.t1.shape:
            raise ShapeMismatch(f"label {self.label.shape} does not match images {self.t1.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.t1.shape


@dataclass(frozen=True, eq=False)
class LatentMap:
    """Encoder output: ``features`` is a c x h x w tensor."""

    features: torch.Tensor
    patch_stride: int = 1

    def __post_init__(self):
        f = self.features
        if not isinstance(f, torch.Tensor):
            f = torch.as_tensor(np.asarray(f))
            object.__setattr__(self, "features", f)
        if f.ndim != 3:
            raise ShapeMismatch(f"latent must be c x h x w, got {tuple(f.shape)}")
        if not bool(torch.isfinite(f).all()):
            raise ValueRange("latent contains non-finite values")
        if self.patch_stride < 1:
            raise ConfigError("patch_stride must be positive")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.features.shape)


@dataclass(frozen=True, eq=False)
class ChangeProbMap:
    """Change probabilities on an h x w grid, stored as float32.

    ``patch_stride`` (image pixels per cell) is kept when known so the map can
    be upsampled back to image resolution exactly.
    """

    probs: np.ndarray
    patch_stride: Optional[int] = None

    def __post_init__(self):
        p = np.asarray(self.probs)
        if p.ndim != 2:
            raise ShapeMismatch(f"probability map must be 2-D, got {p.shape}")
        if not np.all(np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0:
            raise ValueRange("probabilities must be finite and lie in [0, 1]")
        p = p.astype(np.float32)
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape


@dataclass(frozen=True)
class MaskSet:
    masks: tuple[BinaryMask, ...] = ()

    def __post_init__(self):
        masks = tuple(m if isinstance(m, BinaryMask) else BinaryMask(m) for m in self.masks)
        shapes = {m.shape for m in masks}
        if len(shapes) > 1:
            raise ShapeMismatch(f"heterogeneous mask shapes {sorted(shapes)}")
        object.__setattr__(self, "masks", masks)

    def __len__(self):
        return len(self.masks)

    def __iter__(self):
        return iter(self.masks)

    def __getitem__(self, i):
        return self.masks[i]

    @property
    def shape(self) -> Optional[tuple[int, int]]:
        return self.masks[0].shape if self.masks else None


def _check_nonneg(name: str, value: float):
    if not math.isfinite(value) or value < 0:
        raise ConfigError(f"{name} must be finite and non-negative, got {value}")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.2
    beta: float = 1.0

    def __post_init__(self):
        _check_nonneg("alpha", self.alpha)
        _check_nonneg("beta", self.beta)


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 1.0

    def __post_init__(self):
        _check_nonneg("margin", self.margin)


@dataclass(frozen=True)
class SparsityConfig:
    threshold_T: float = 0.2
    grid_d: int = 16

    def __post_init__(self):
        if not 0.0 < self.threshold_T < 1.0:
            raise ConfigError(f"threshold_T must lie in (0, 1), got {self.threshold_T}")
        if self.grid_d < 1:
            raise ConfigError(f"grid_d must be positive, got {self.grid_d}")


@dataclass(frozen=True)
class MappingConfig:
    eta: float = math.log(1 / 0.07)

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigError(f"eta must be positive, got {self.eta}")


@dataclass(frozen=True)
class RefineConfig:
    iou_threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.iou_threshold < 1.0:
            raise ConfigError(f"iou_threshold must lie in (0, 1), got {self.iou_threshold}")


def validate(pair: ImagePair) -> ImagePair:
    """Re-check every invariant of ``pair`` and return it unchanged."""
    for img in (pair.t1, pair.t2):
        px = img.pixels
        if not np.all(np.isfinite(px)) or px.min() < 0 or px.max() > 1:
            raise ValueRange("pixels must be finite and lie in [0, 1]")
    if pair.t1.shape != pair.t2.shape:
        raise ShapeMismatch("temporal images differ in shape")
    if pair.label is not None and pair.label.shape != pair.t1.shape:
        raise ShapeMismatch("label differs in shape")
    return pair


def stack_images(images: Sequence[RasterImage], dtype=torch.float32) -> torch.Tensor:
    """Stack images into an N x C x H x W tensor."""
    arr = np.stack([im.pixels for im in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)
