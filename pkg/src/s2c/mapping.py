"""Inference-side change mapping and mask refinement."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np
import torch
from scipy import ndimage

from .core import (BinaryMask, ChangeProbMap, MappingConfig, MaskSet, RasterImage, RefineConfig,
                   S2CError, ShapeMismatch)
from .losses import Latent, as_tensor, cosine_map


class EmptyMaskInSet(S2CError, ValueError):
    pass


def change_prob(y1: Latent, y2: Latent, eta: float = MappingConfig().eta) -> torch.Tensor:
    """Differentiable change probability ``sigmoid(-cos * eta)`` per patch."""
    return torch.sigmoid(-cosine_map(y1, y2) * eta)


def change_prob_map(y1: Latent, y2: Latent, cfg: MappingConfig = MappingConfig()) -> ChangeProbMap:
    a, b = as_tensor(y1), as_tensor(y2)
    if a.ndim != 3:
        raise ShapeMismatch("change_prob_map expects single c x h x w latents")
    with torch.no_grad():
        probs = change_prob(a.double(), b.double(), cfg.eta).numpy()
    stride = getattr(y1, "patch_stride", None)
    return ChangeProbMap(probs, stride)


def upsample_nearest(grid: np.ndarray, shape: tuple[int, int], stride: Optional[int] = None) -> np.ndarray:
    """Nearest-neighbour upsampling of a latent-resolution grid to ``shape``.

    With a known stride, image pixel ``r`` maps to cell ``r // stride``;
    otherwise cells are spread proportionally.
    """
    h, w = grid.shape
    out_h, out_w = shape
    if (h, w) == (out_h, out_w):
        return np.array(grid)
    if stride:
        rows = np.minimum(np.arange(out_h) // stride, h - 1)
        cols = np.minimum(np.arange(out_w) // stride, w - 1)
    else:
        rows = np.arange(out_h) * h // out_h
        cols = np.arange(out_w) * w // out_w
    return grid[rows][:, cols]


def _probs_at(yc: ChangeProbMap, shape: Optional[tuple[int, int]]) -> np.ndarray:
    if shape is None:
        if yc.patch_stride is None:
            return yc.probs
        h, w = yc.shape
        shape = (h * yc.patch_stride, w * yc.patch_stride)
    return upsample_nearest(yc.probs, shape, yc.patch_stride)


def binarize(yc: ChangeProbMap, thresh: float = 0.5, shape: Optional[tuple[int, int]] = None) -> BinaryMask:
    """Strict ``yc > thresh``, upsampled (nearest) to ``shape``."""
    if not 0.0 < thresh < 1.0:
        raise ValueError(f"thresh must lie in (0, 1), got {thresh}")
    return BinaryMask(_probs_at(yc, shape) > thresh)


# -- prompts -----------------------------------------------------------------

@dataclass(frozen=True)
class Prompt:
    row: float  # latent coordinates
    col: float
    img_row: int  # image pixel coordinates
    img_col: int
    peak: float


@dataclass(frozen=True)
class PromptSet:
    points: tuple[Prompt, ...] = ()
    map_shape: tuple[int, int] = (0, 0)

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)


FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def extract_prompts(yc: ChangeProbMap, thresh: float = 0.5, max_points: int = 32,
                    image_shape: Optional[tuple[int, int]] = None) -> PromptSet:
    """One prompt per 4-connected high-response component, at its
    probability-weighted centroid, ranked by component peak."""
    if not 0.0 < thresh < 1.0:
        raise ValueError(f"thresh must lie in (0, 1), got {thresh}")
    probs = yc.probs.astype(np.float64)
    h, w = probs.shape
    stride = yc.patch_stride or 1
    if image_shape is None:
        image_shape = (h * stride, w * stride)
    labels, n = ndimage.label(probs > thresh, structure=FOUR_CONNECTED)
    found = []
    rr, cc = np.mgrid[0:h, 0:w]
    for k in range(1, n + 1):
        sel = labels == k
        weights = probs[sel]
        r = float((weights * rr[sel]).sum() / weights.sum())
        c = float((weights * cc[sel]).sum() / weights.sum())
        # cell centre of (r, c) in image pixels
        ir = int(np.clip(np.floor((r + 0.5) * stride), 0, image_shape[0] - 1))
        ic = int(np.clip(np.floor((c + 0.5) * stride), 0, image_shape[1] - 1))
        found.append(Prompt(r, c, ir, ic, float(weights.max())))
    found.sort(key=lambda p: -p.peak)  # stable: ties keep scan order
    return PromptSet(tuple(found[:max_points]), (h, w))


# -- mask proposal -----------------------------------------------------------

class MaskProposer(Protocol):
    def propose(self, img: RasterImage, prompts: PromptSet) -> MaskSet: ...


@dataclass
class ColorComponentProposer:
    """Segment the connected region of uniform quantised colour around each prompt.

    The image is lightly smoothed, each channel is quantised into ``levels``
    bins over the image's own range, and the 4-connected component of equal
    codes containing the prompt pixel becomes the mask. Components covering
    more than ``max_area_frac`` of the image are discarded as background.
    """

    levels: int = 4
    smooth_sigma: float = 1.0
    min_area: int = 4
    max_area_frac: float = 0.25

    def quantize(self, img: RasterImage) -> np.ndarray:
        px = img.pixels
        if self.smooth_sigma > 0:
            px = ndimage.gaussian_filter(px, sigma=(self.smooth_sigma, self.smooth_sigma, 0))
        lo = px.min(axis=(0, 1), keepdims=True)
        span = np.maximum(px.max(axis=(0, 1), keepdims=True) - lo, 1e-12)
        q = np.minimum(((px - lo) / span * self.levels).astype(np.int64), self.levels - 1)
        codes = np.zeros(q.shape[:2], dtype=np.int64)
        for ch in range(q.shape[2]):
            codes = codes * self.levels + q[:, :, ch]
        return codes

    def propose(self, img: RasterImage, prompts: PromptSet) -> MaskSet:
        codes = self.quantize(img)
        max_area = self.max_area_frac * codes.size
        masks: list[np.ndarray] = []
        seen: set[bytes] = set()
        for p in prompts:
            region = codes == codes[p.img_row, p.img_col]
            labels, _ = ndimage.label(region, structure=FOUR_CONNECTED)
            comp = labels == labels[p.img_row, p.img_col]
            area = int(comp.sum())
            if area < self.min_area or area > max_area:
                continue
            key = np.packbits(comp).tobytes()
            if key not in seen:
                seen.add(key)
                masks.append(comp)
        return MaskSet(tuple(BinaryMask(m) for m in masks))


# -- matching and refinement ---------------------------------------------------

def iou(a: BinaryMask, b: BinaryMask) -> float:
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a.bits, b.bits).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a.bits, b.bits).sum() / union)


def _check_shapes(*sets: MaskSet) -> Optional[tuple[int, int]]:
    shapes = {s.shape for s in sets if len(s)}
    if len(shapes) > 1:
        raise ShapeMismatch(f"mask sets differ in shape: {sorted(shapes)}")
    return shapes.pop() if shapes else None


def xor_merge(M1: MaskSet, M2: MaskSet, cfg: RefineConfig = RefineConfig()) -> MaskSet:
    """Drop every cross-date pair whose IoU exceeds the threshold, greedily in
    index order (each mask can be dropped once), and concatenate the rest."""
    _check_shapes(M1, M2)
    alive1 = [True] * len(M1)
    alive2 = [True] * len(M2)
    for i, mi in enumerate(M1):
        for j, mj in enumerate(M2):
            if alive1[i] and alive2[j] and iou(mi, mj) > cfg.iou_threshold:
                alive1[i] = alive2[j] = False
    survivors = [m for m, ok in zip(M1, alive1) if ok] + [m for m, ok in zip(M2, alive2) if ok]
    return MaskSet(tuple(survivors))


def mean_prob_in_mask(mask: BinaryMask, probs: np.ndarray) -> float:
    return float((mask.bits * probs.astype(np.float64)).sum() / mask.area)


def iou_refine(yc: ChangeProbMap, M1: MaskSet, M2: MaskSet, cfg: RefineConfig = RefineConfig(),
               shape: Optional[tuple[int, int]] = None, fill_thresh: float = 0.5) -> BinaryMask:
    """Refine a coarse change map with bi-temporal object masks.

    Masks surviving :func:`xor_merge` whose mean change probability exceeds
    the threshold are accepted as changes. Inside the footprint of any
    candidate mask the accepted masks are authoritative; elsewhere the coarse
    map thresholded at ``fill_thresh`` is kept.
    """
    mask_shape = _check_shapes(M1, M2)
    if shape is None:
        shape = mask_shape
    elif mask_shape is not None and mask_shape != shape:
        raise ShapeMismatch(f"masks {mask_shape} do not match requested shape {shape}")
    for m in (*M1, *M2):
        if m.area == 0:
            raise EmptyMaskInSet("candidate mask has zero area")
    probs = _probs_at(yc, shape)
    out = np.zeros(probs.shape, dtype=bool)
    cover = np.zeros(probs.shape, dtype=bool)
    for m in (*M1, *M2):
        cover |= m.bits
    for m in xor_merge(M1, M2, cfg):
        if mean_prob_in_mask(m, probs) > cfg.iou_threshold:
            out |= m.bits
    out |= ~cover & (probs > fill_thresh)
    return BinaryMask(out)


def refine_pair(yc: ChangeProbMap, t1: RasterImage, t2: RasterImage, proposer: MaskProposer,
                cfg: RefineConfig = RefineConfig(), prompt_thresh: float = 0.5,
                max_points: int = 32) -> BinaryMask:
    """Prompt the proposer on both dates and refine ``yc`` with the resulting masks."""
    prompts = extract_prompts(yc, prompt_thresh, max_points, image_shape=t1.shape)
    return iou_refine(yc, proposer.propose(t1, prompts), proposer.propose(t2, prompts), cfg, shape=t1.shape)
