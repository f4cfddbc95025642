"""Stochastic temporal-noise augmentation.

Strong augmentation perturbs each temporal image with a spectral stage
(PCA colour transfer toward the other date, then a per-channel shift) and a
spatial stage (down/up-sampling, then a translation). Weak augmentation
applies one shared flip/crop to both dates and the label.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import BinaryMask, ConfigError, ImagePair, RasterImage, S2CError


class SingularCovariance(S2CError, ArithmeticError):
    pass


COV_EPS = 1e-8
COV_JITTER = 1e-6


@dataclass(frozen=True)
class AugmentConfig:
    rgb_shift_max: float = 0.10
    pca_blend_range: tuple[float, float] = (0.0, 1.0)
    downsample_scale_range: tuple[float, float] = (0.5, 1.0)
    shift_max_px: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.rgb_shift_max < 0:
            raise ConfigError("rgb_shift_max must be non-negative")
        lo, hi = self.pca_blend_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError(f"bad pca_blend_range {self.pca_blend_range}")
        lo, hi = self.downsample_scale_range
        if not 0.25 <= lo <= hi <= 1.0:
            raise ConfigError(f"bad downsample_scale_range {self.downsample_scale_range}")
        if self.shift_max_px < 0:
            raise ConfigError("shift_max_px must be non-negative")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentConfig":
        return cls(0.0, (0.0, 0.0), (1.0, 1.0), 0, seed)


@dataclass(frozen=True)
class StrongDraw:
    """Every random parameter used to augment one temporal image."""

    rgb_offsets: tuple[float, ...]
    pca_blend: float
    scale: float
    dx: int
    dy: int


@dataclass(frozen=True, eq=False)
class AugmentedPair:
    bar_t1: RasterImage
    bar_t2: RasterImage
    draw_log: dict = field(default_factory=dict)


def rgb_shift(img: RasterImage, rng: np.random.Generator, max_shift: float = 0.10,
              offsets: Optional[np.ndarray] = None) -> RasterImage:
    """Offset each channel by an independent uniform draw in [-max_shift, max_shift]."""
    if offsets is None:
        offsets = rng.uniform(-max_shift, max_shift, size=img.channels) if max_shift > 0 \
            else np.zeros(img.channels)
    offsets = np.asarray(offsets, dtype=np.float64)
    return RasterImage(np.clip(img.pixels + offsets[None, None, :], 0.0, 1.0), img.resolution_m)


def _channel_stats(px: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    flat = px.reshape(-1, px.shape[2])
    mu = flat.mean(axis=0)
    cov = np.cov(flat, rowvar=False, bias=True)
    evals, evecs = np.linalg.eigh(cov)
    if evals.min() < COV_EPS:
        evals, evecs = np.linalg.eigh(cov + COV_JITTER * np.eye(cov.shape[0]))
    return mu, np.maximum(evals, COV_JITTER), evecs


def pca_transfer(src: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Recolour ``src`` so its channel mean/covariance match ``ref`` (unclipped)."""
    mu1, l1, e1 = _channel_stats(src)
    mu2, l2, e2 = _channel_stats(ref)
    whiten = e1 @ np.diag(l1 ** -0.5) @ e1.T
    colour = e2 @ np.diag(l2 ** 0.5) @ e2.T
    flat = (src.reshape(-1, src.shape[2]) - mu1) @ (colour @ whiten).T + mu2
    return flat.reshape(src.shape)


def pca_adapt(src: RasterImage, ref: RasterImage, blend: float,
              rng: Optional[np.random.Generator] = None) -> RasterImage:
    """Blend ``src`` toward its PCA colour transfer onto ``ref``'s statistics.

    Near-singular covariances (eigenvalue below 1e-8) are regularised with a
    1e-6 identity jitter instead of raising :class:`SingularCovariance`.
    """
    if src.channels != 3 or ref.channels != 3:
        raise ConfigError("pca_adapt needs 3-channel images")
    if not 0.0 <= blend <= 1.0:
        raise ConfigError(f"blend must lie in [0, 1], got {blend}")
    if blend == 0.0:
        return src
    out = (1.0 - blend) * src.pixels + blend * pca_transfer(src.pixels, ref.pixels)
    return RasterImage(np.clip(out, 0.0, 1.0), src.resolution_m)


def bilinear_resize(px: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resampling of an H x W x C array."""
    h, w = px.shape[:2]
    if (h, w) == (out_h, out_w):
        return px.copy()

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        i0 = np.floor(pos).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    y0, y1, wy = axis(h, out_h)
    x0, x1, wx = axis(w, out_w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    a = px[y0][:, x0]
    b = px[y0][:, x1]
    c = px[y1][:, x0]
    d = px[y1][:, x1]
    return (1.0 - wy) * ((1.0 - wx) * a + wx * b) + wy * ((1.0 - wx) * c + wx * d)


def downsample_degrade(img: RasterImage, scale: float) -> RasterImage:
    if not 0.25 <= scale <= 1.0:
        raise ConfigError(f"scale must lie in [0.25, 1], got {scale}")
    if scale == 1.0:
        return img
    h, w = img.shape
    small = bilinear_resize(img.pixels, max(1, int(scale * h)), max(1, int(scale * w)))
    return RasterImage(np.clip(bilinear_resize(small, h, w), 0.0, 1.0), img.resolution_m)


def shift_array(px: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate by (dx, dy) pixels (x = column) with edge replication."""
    h, w = px.shape[:2]
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return px[rows][:, cols]


def random_shift(img: RasterImage, dx: int, dy: int) -> RasterImage:
    if dx == 0 and dy == 0:
        return img
    return RasterImage(shift_array(img.pixels, dx, dy), img.resolution_m)


def draw_strong(img: RasterImage, cfg: AugmentConfig, rng: np.random.Generator) -> StrongDraw:
    c = img.channels
    if cfg.rgb_shift_max > 0:
        offsets = tuple(float(v) for v in rng.uniform(-cfg.rgb_shift_max, cfg.rgb_shift_max, size=c))
    else:
        offsets = (0.0,) * c
    blend = float(rng.uniform(*cfg.pca_blend_range))
    scale = float(rng.uniform(*cfg.downsample_scale_range))
    s = cfg.shift_max_px
    dx, dy = (int(v) for v in rng.integers(-s, s + 1, size=2))
    return StrongDraw(offsets, blend, scale, dx, dy)


def apply_strong(img: RasterImage, ref: RasterImage, draw: StrongDraw) -> RasterImage:
    """Spectral stage (PCA transfer toward ``ref``, then RGB shift), then spatial stage."""
    out = img
    if img.channels == 3 and ref.channels == 3:
        out = pca_adapt(out, ref, draw.pca_blend)
    out = rgb_shift(out, None, offsets=np.asarray(draw.rgb_offsets))
    out = downsample_degrade(out, draw.scale)
    return random_shift(out, draw.dx, draw.dy)


def strong_augment(pair: ImagePair, cfg: AugmentConfig, rng: np.random.Generator) -> AugmentedPair:
    d1 = draw_strong(pair.t1, cfg, rng)
    d2 = draw_strong(pair.t2, cfg, rng)
    return AugmentedPair(
        bar_t1=apply_strong(pair.t1, pair.t2, d1),
        bar_t2=apply_strong(pair.t2, pair.t1, d2),
        draw_log={"t1": d1, "t2": d2},
    )


def _nearest_resize(bits: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = bits.shape[:2]
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return bits[rows][:, cols]


@dataclass(frozen=True)
class WeakDraw:
    hflip: bool
    vflip: bool
    crop: Optional[tuple[int, int, int, int]] = None  # top, left, height, width


def draw_weak(shape: tuple[int, int], rng: np.random.Generator, enable_crop: bool) -> WeakDraw:
    hflip, vflip = (bool(v) for v in rng.random(2) < 0.5)
    crop = None
    if enable_crop:
        h, w = shape
        # side fractions >= sqrt(0.5) keep at least half the area
        fy, fx = rng.uniform(np.sqrt(0.5), 1.0, size=2)
        ch, cw = max(1, int(round(fy * h))), max(1, int(round(fx * w)))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        crop = (top, left, ch, cw)
    return WeakDraw(hflip, vflip, crop)


def apply_weak(arr: np.ndarray, draw: WeakDraw, nearest: bool = False) -> np.ndarray:
    out = arr
    if draw.crop is not None:
        top, left, ch, cw = draw.crop
        h, w = arr.shape[:2]
        out = out[top:top + ch, left:left + cw]
        out = _nearest_resize(out, h, w) if nearest else bilinear_resize(out, h, w)
    if draw.hflip:
        out = out[:, ::-1]
    if draw.vflip:
        out = out[::-1]
    return np.ascontiguousarray(out)


def weak_augment(pair: ImagePair, rng: np.random.Generator, enable_crop: bool = False,
                 draw: Optional[WeakDraw] = None) -> ImagePair:
    """Apply one shared flip (and optional crop-and-enlarge) to t1, t2 and label."""
    if draw is None:
        draw = draw_weak(pair.shape, rng, enable_crop)
    if not draw.hflip and not draw.vflip and draw.crop is None:
        return pair

    def img(im: RasterImage) -> RasterImage:
        return RasterImage(np.clip(apply_weak(im.pixels, draw), 0.0, 1.0), im.resolution_m)

    label = None
    if pair.label is not None:
        label = BinaryMask(apply_weak(pair.label.bits, draw, nearest=True))
    return ImagePair(img(pair.t1), img(pair.t2), label)
