"""Synthetic bi-temporal scenes with known change labels.

A scene is a blobby land-cover map whose classes carry their own colour and
texture. The second date receives labelled object changes plus the nuisance
effects a change detector must ignore: unlabelled tiny objects, per-class
seasonal colour drift, a global radiometric drift, sub-pixel misalignment and
sensor noise. The ``pseudo-sar`` modality turns the second date into a
single-channel speckled image.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from ..core import BinaryMask, ConfigError, ImagePair, RasterImage

# pseudo-SAR transform: fixed so multimodal runs are reproducible
SAR_MIX = np.array([0.15, 0.55, 0.30])
SAR_GAMMA = 0.7
SAR_LOOKS = 4.0


@dataclass(frozen=True)
class SyntheticSceneConfig:
    size: tuple[int, int] = (64, 64)
    n_classes: int = 5
    n_background_blobs: int = 8
    n_change_objects: int = 2
    min_object_area: int = 144
    max_object_area: int = 576
    n_insignificant: int = 12
    insignificant_object_area_max: int = 25
    spectral_drift: float = 0.45
    class_drift: float = 0.05
    misalignment_px: float = 3.0
    texture_amp: float = 0.3
    noise_std: float = 0.1
    modality: str = "optical"
    seed: int = 0

    def __post_init__(self):
        if min(self.min_object_area, self.insignificant_object_area_max) <= 0:
            raise ConfigError("object areas must be positive")
        if self.max_object_area < self.min_object_area:
            raise ConfigError("max_object_area < min_object_area")
        if not 0 <= self.misalignment_px <= 8:
            raise ConfigError("misalignment_px must lie in [0, 8]")
        if self.modality not in ("optical", "pseudo-sar"):
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.n_classes < 1 or self.n_background_blobs < 1:
            raise ConfigError("need at least one class and one blob")


@dataclass
class SceneRecord:
    """Bookkeeping of what was drawn, for tests."""

    changes: list = field(default_factory=list)  # (top, left, h, w, date, old class, new class)
    insignificant: list = field(default_factory=list)  # (top, left, h, w, date)
    offset: tuple[float, float] = (0.0, 0.0)


# land-cover palette: base colour and texture period per class
PALETTE = np.array([
    [0.15, 0.25, 0.55],  # water
    [0.20, 0.55, 0.20],  # vegetation
    [0.75, 0.70, 0.25],  # cropland
    [0.60, 0.35, 0.20],  # bare soil
    [0.45, 0.45, 0.50],  # urban fabric
    [0.85, 0.30, 0.45],  # buildings
])
TEXTURE_PERIOD = np.array([0.0, 3.0, 6.0, 0.0, 4.0, 8.0])  # 0 = speckle texture


def _class_map(cfg: SyntheticSceneConfig, rng: np.random.Generator, n_classes: int) -> np.ndarray:
    h, w = cfg.size
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    score = np.zeros((n_classes, h, w))
    for _ in range(cfg.n_background_blobs):
        k = rng.integers(n_classes)
        r0, c0 = rng.uniform(0, h), rng.uniform(0, w)
        rad = rng.uniform(0.15, 0.35) * min(h, w)
        score[k] += np.exp(-((rr - r0) ** 2 + (cc - c0) ** 2) / (2 * rad ** 2))
    score += 1e-3 * rng.random(score.shape)
    return score.argmax(axis=0)


def _texture(k: int, shape, rng: np.random.Generator, amp: float) -> np.ndarray:
    h, w = shape
    period = TEXTURE_PERIOD[k]
    if period == 0:
        return amp * ndimage.gaussian_filter(rng.normal(size=(h, w)), 0.7) * 2.0
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    return amp * np.sin(2 * np.pi * (rr * np.cos(theta) + cc * np.sin(theta)) / period + phase)


def _rect(rng: np.random.Generator, area_lo: int, area_hi: int, size: tuple[int, int]) -> tuple[int, int]:
    h_max, w_max = size
    for _ in range(100):
        area = int(rng.integers(area_lo, area_hi + 1))
        side = int(rng.integers(max(1, int(np.ceil(np.sqrt(area) * 0.6))), int(np.sqrt(area) * 1.6) + 1))
        other = int(round(area / side))
        if area_lo <= side * other <= area_hi and side <= h_max and other <= w_max:
            return side, other
    s = int(round(np.sqrt(area_lo)))
    return s, s


def gen_scene_with_record(cfg: SyntheticSceneConfig) -> tuple[ImagePair, SceneRecord]:
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.size
    n_classes = min(cfg.n_classes, len(PALETTE))
    rec = SceneRecord()
    classes = _class_map(cfg, rng, n_classes)
    textures = np.stack([_texture(k, (h, w), rng, cfg.texture_amp) for k in range(len(PALETTE))])
    colours1 = PALETTE + rng.normal(0, 0.03, size=PALETTE.shape)
    colours2 = colours1.copy()
    if cfg.class_drift > 0:
        dirs = rng.normal(size=PALETTE.shape)
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        colours2 = colours1 + cfg.class_drift * rng.uniform(0.5, 1.0, size=(len(PALETTE), 1)) * dirs
    # per-date class maps: changes are land-cover transitions
    classes1 = classes.copy()
    classes2 = classes.copy()

    label = np.zeros((h, w), dtype=bool)
    occupied = np.zeros((h, w), dtype=bool)
    for _ in range(cfg.n_change_objects):
        for _attempt in range(50):
            oh, ow = _rect(rng, cfg.min_object_area, cfg.max_object_area, (h, w))
            top = int(rng.integers(0, h - oh + 1))
            left = int(rng.integers(0, w - ow + 1))
            if not occupied[max(0, top - 2):top + oh + 2, max(0, left - 2):left + ow + 2].any():
                break
        sl = (slice(top, top + oh), slice(left, left + ow))
        dominant = np.bincount(classes[sl].ravel(), minlength=len(PALETTE)).argmax()
        new_class = int(rng.choice([k for k in range(len(PALETTE)) if k != dominant]))
        date = 2 if rng.random() < 0.5 else 1
        (classes2 if date == 2 else classes1)[sl] = new_class
        label[sl] = True
        occupied[sl] = True
        rec.changes.append((top, left, oh, ow, date, int(dominant), new_class))

    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    img1 = colours1[classes1] + textures[classes1, rows, cols][..., None]
    img2 = colours2[classes2] + textures[classes2, rows, cols][..., None]

    side_max = max(1, int(np.sqrt(cfg.insignificant_object_area_max)))
    for _ in range(cfg.n_insignificant):
        for _attempt in range(50):
            oh = int(rng.integers(1, side_max + 1))
            ow = int(rng.integers(1, min(side_max + 1, cfg.insignificant_object_area_max // oh) + 1))
            top = int(rng.integers(0, h - oh + 1))
            left = int(rng.integers(0, w - ow + 1))
            if not occupied[max(0, top - 3):top + oh + 3, max(0, left - 3):left + ow + 3].any():
                break
        else:
            continue
        sl = (slice(top, top + oh), slice(left, left + ow))
        date = 2 if rng.random() < 0.5 else 1
        (img2 if date == 2 else img1)[sl] = rng.uniform(0.0, 1.0, size=3)
        occupied[sl] = True
        rec.insignificant.append((top, left, oh, ow, date))

    if cfg.spectral_drift > 0:
        # global affine colour transform: per-channel gain and bias plus channel cross-talk
        d = cfg.spectral_drift
        mix = np.diag(1.0 + rng.uniform(-d, d, size=3)) + rng.uniform(-d, d, size=(3, 3)) / 2
        bias = rng.uniform(-d, d, size=3) / 2
        centre = img2.reshape(-1, 3).mean(axis=0)
        img2 = (img2 - centre) @ mix.T + centre + bias

    if cfg.misalignment_px > 0:
        dy, dx = rng.uniform(-cfg.misalignment_px, cfg.misalignment_px, size=2)
        img2 = ndimage.shift(img2, (dy, dx, 0), order=1, mode="nearest")
        label = ndimage.shift(label.astype(np.uint8), (round(dy), round(dx)), order=0, mode="constant") > 0
        rec.offset = (float(dy), float(dx))

    if cfg.noise_std > 0:
        img1 = img1 + rng.normal(0, cfg.noise_std, img1.shape)
        img2 = img2 + rng.normal(0, cfg.noise_std, img2.shape)
    img1 = np.clip(img1, 0.0, 1.0)
    img2 = np.clip(img2, 0.0, 1.0)

    if cfg.modality == "pseudo-sar":
        img2 = to_pseudo_sar(img2, rng)
    return ImagePair(RasterImage(img1), RasterImage(img2), BinaryMask(label)), rec


def to_pseudo_sar(rgb: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Channel mix, gamma warp and multiplicative gamma speckle to a 1-channel image."""
    gray = np.clip(rgb @ SAR_MIX, 0.0, 1.0) ** SAR_GAMMA
    speckle = rng.gamma(SAR_LOOKS, 1.0 / SAR_LOOKS, size=gray.shape)
    return np.clip(gray * speckle, 0.0, 1.0)[..., None]


def gen_scene(cfg: SyntheticSceneConfig) -> ImagePair:
    return gen_scene_with_record(cfg)[0]


def gen_dataset(cfg: SyntheticSceneConfig, n: int, seed: Optional[int] = None) -> list[ImagePair]:
    """``n`` scenes with per-scene seeds derived from ``seed`` (default ``cfg.seed``)."""
    from dataclasses import replace
    base = cfg.seed if seed is None else seed
    seeds = np.random.SeedSequence(base).generate_state(n)
    return [gen_scene(replace(cfg, seed=int(s))) for s in seeds]
