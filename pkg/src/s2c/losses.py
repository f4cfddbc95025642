"""Training objectives.

Every function accepts :class:`~s2c.core.LatentMap` objects or raw tensors.
Tensors may carry leading batch dimensions (``... x c x h x w``); reductions
then run over the trailing three axes and, where noted, average over the
batch. All functions are differentiable with torch autograd.
"""

from __future__ import annotations

from typing import Sequence, Union

import torch
import torch.nn.functional as F

from .core import ChangeProbMap, LatentMap, LossWeights, S2CError, ShapeMismatch, SparsityConfig, TripletConfig

Latent = Union[LatentMap, torch.Tensor]

NORM_EPS = 1e-8


class BatchTooSmall(S2CError, ValueError):
    pass


class GridTooLarge(S2CError, ValueError):
    pass


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, LatentMap):
        return x.features
    if isinstance(x, ChangeProbMap):
        return torch.from_numpy(x.probs.astype("float64"))
    return x


def _same_shape(*xs: torch.Tensor) -> None:
    shapes = {tuple(x.shape) for x in xs}
    if len(shapes) != 1:
        raise ShapeMismatch(f"latent shapes differ: {sorted(shapes)}")


def cosine_map(a: Latent, b: Latent) -> torch.Tensor:
    """Per-patch cosine similarity over the channel axis: ``... x h x w``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-3:] != b.shape[-3:]:
        raise ShapeMismatch(f"latent shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    dot = (a * b).sum(dim=-3)
    na = a.norm(dim=-3).clamp_min(NORM_EPS)
    nb = b.norm(dim=-3).clamp_min(NORM_EPS)
    return dot / (na * nb)


def patch_cosine(a: Latent, b: Latent) -> torch.Tensor:
    """Spatial mean of per-patch cosine similarity."""
    return cosine_map(a, b).mean(dim=(-2, -1))


def triplet_loss(y1: Latent, bar_y1: Latent, y2: Latent, bar_y2: Latent,
                 cfg: TripletConfig = TripletConfig()) -> torch.Tensor:
    """Bi-directional temporal triplet: each date is pulled toward its augmented
    copy and pushed from the other date. Batched inputs are averaged."""
    y1, bar_y1, y2, bar_y2 = map(as_tensor, (y1, bar_y1, y2, bar_y2))
    _same_shape(y1, bar_y1, y2, bar_y2)
    neg = patch_cosine(y1, y2)
    # relu has zero gradient at the kink
    loss = (torch.relu(neg - patch_cosine(y1, bar_y1) + cfg.margin)
            + torch.relu(neg - patch_cosine(y2, bar_y2) + cfg.margin))
    return loss.mean()


def _stack(batch) -> torch.Tensor:
    if isinstance(batch, torch.Tensor):
        return batch
    return torch.stack([as_tensor(x) for x in batch])


def similarity_matrix(anchors: torch.Tensor, others: torch.Tensor) -> torch.Tensor:
    """``S[u, v] = patch_cosine(anchors[u], others[v])``."""
    return patch_cosine(anchors[:, None], others[None, :])


def _nce_term(sim: torch.Tensor) -> torch.Tensor:
    # logsumexp subtracts the row max internally
    return (torch.logsumexp(sim, dim=1) - sim.diagonal()).mean()


def info_nce(Y1: Sequence[Latent], Y2: Sequence[Latent],
             barY1: Sequence[Latent], barY2: Sequence[Latent]) -> torch.Tensor:
    """Spatial contrast across both dates: date-1 latents must pick out the
    augmented date-2 latent of the same scene among the batch, and vice versa."""
    Y1, Y2, barY1, barY2 = map(_stack, (Y1, Y2, barY1, barY2))
    _same_shape(Y1, Y2, barY1, barY2)
    if Y1.shape[0] < 2:
        raise BatchTooSmall(f"info_nce needs a batch of at least 2, got {Y1.shape[0]}")
    return _nce_term(similarity_matrix(Y1, barY2)) + _nce_term(similarity_matrix(Y2, barY1))


def grid_densities(yc: torch.Tensor, d: int) -> torch.Tensor:
    """Mean of every full d x d grid in scan order (partial edge grids dropped)."""
    h, w = yc.shape[-2:]
    gh, gw = h // d, w // d
    if gh == 0 or gw == 0:
        raise GridTooLarge(f"no full {d}x{d} grid fits in a {h}x{w} map")
    cropped = yc[..., : gh * d, : gw * d]
    grids = cropped.reshape(*yc.shape[:-2], gh, d, gw, d)
    return grids.mean(dim=(-3, -1)).reshape(*yc.shape[:-2], gh * gw)


def grid_sparsity(yc, cfg: SparsityConfig = SparsityConfig()) -> torch.Tensor:
    """Mean density of the ``floor(G * (1 - T))`` emptiest grids.

    ``yc`` is an h x w map or a batch of them; batched maps are averaged.
    """
    yc = as_tensor(yc)
    dens = grid_densities(yc, cfg.grid_d)
    n_grids = dens.shape[-1]
    n = int(n_grids * (1.0 - cfg.threshold_T))
    if n == 0:
        return yc.sum() * 0.0
    lowest = torch.sort(dens, dim=-1, stable=True).values[..., :n]
    return torch.relu(lowest.mean(dim=-1)).mean()


def total_loss(tri, info, spa, w: LossWeights = LossWeights()):
    return tri + w.alpha * info + w.beta * spa
