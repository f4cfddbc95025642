"""Training: schedule, optimizer, the per-iteration step and the epoch loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentConfig, apply_strong, draw_strong, strong_augment, weak_augment
from .core import (ChangeProbMap, ConfigError, ImagePair, LatentMap, LossWeights, MappingConfig,
                   S2CError, ShapeMismatch, SparsityConfig, TripletConfig, stack_images)
from .encoder import LoRAConfig, Params, Siamese, apply_lora, reference_encoder
from .evaluation import pooled_metrics
from .losses import grid_sparsity, info_nce, total_loss, triplet_loss
from .mapping import binarize, change_prob, change_prob_map
from .mmcd import DualEncoder, het_info_nce, het_triplet

log = logging.getLogger(__name__)

COMPONENTS = frozenset({"ctc", "csc", "spa"})


class EmptyDataset(S2CError, ValueError):
    pass


class TrainingDiverged(S2CError, FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr0: float = 0.01
    schedule_power: float = 1.5
    momentum: float = 0.9
    weights: LossWeights = LossWeights()
    sparsity: SparsityConfig = SparsityConfig()
    triplet: TripletConfig = TripletConfig()
    # shifts capped near the synthetic misalignment range
    augment: AugmentConfig = AugmentConfig(shift_max_px=2)
    mapping: MappingConfig = MappingConfig()
    seed: int = 0
    mode: str = "homogeneous"
    # which objectives enter the joint loss; subsets are for ablations
    components: frozenset = COMPONENTS
    weak_augment: bool = True
    crop_augment: bool = False
    latent_channels: int = 32
    patch_stride: int = 8
    hidden_channels: int = 128
    stage_norm: bool = False
    lora_rank: int = 0
    lora_targets: tuple[str, ...] = ("proj",)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be positive")
        if self.mode not in ("homogeneous", "mmcd"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        object.__setattr__(self, "components", frozenset(self.components))
        if not self.components or not self.components <= COMPONENTS:
            raise ConfigError(f"components must be a non-empty subset of {sorted(COMPONENTS)}")


@dataclass
class BestRecord:
    epoch: int = -1
    f1: float = -1.0
    params: Optional[Params] = None


@dataclass
class TrainState:
    model: Siamese
    iteration: int = 0
    total_iterations: int = 0
    buffers: Params = field(default_factory=dict)
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    best: BestRecord = field(default_factory=BestRecord)
    history: list = field(default_factory=list)

    def best_model(self) -> Siamese:
        if self.best.params is None:
            return self.model
        return self.model.with_flat(self.best.params)


def lr_at(it: int, total: int, cfg: TrainConfig = TrainConfig()) -> float:
    """Polynomial decay ``lr0 * (1 - it / total) ** power``."""
    if total < 1 or not 0 <= it <= total:
        raise ValueError(f"need 0 <= it <= total and total >= 1, got it={it}, total={total}")
    return cfg.lr0 * (1.0 - it / total) ** cfg.schedule_power


def sgd_nesterov_step(params: Params, grads: Params, buffers: Params, lr: float,
                      momentum: float) -> tuple[Params, Params]:
    """One SGD step with Nesterov momentum on the tensors present in ``grads``.

    Velocity form: ``v <- mu*v - lr*g``; ``p <- p + mu*v - lr*g``. Tensors
    without a gradient entry (frozen) are passed through untouched.
    """
    new_params = dict(params)
    new_buffers = dict(buffers)
    with torch.no_grad():
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise ShapeMismatch(f"{name}: grad {tuple(g.shape)} vs param {tuple(p.shape)}")
            v = buffers.get(name)
            v = -lr * g if v is None else momentum * v - lr * g
            new_buffers[name] = v
            new_params[name] = p + momentum * v - lr * g
    return new_params, new_buffers


def build_model(cfg: TrainConfig, rng: np.random.Generator, channels: tuple[int, int] = (3, 3)) -> Siamese:
    lora = LoRAConfig(cfg.lora_rank, 1.0, cfg.lora_targets) if cfg.lora_rank > 0 else None
    if cfg.mode == "mmcd":
        return DualEncoder.reference(cfg.latent_channels, cfg.patch_stride, rng, cfg.hidden_channels,
                                     channels[0], channels[1], lora, cfg.stage_norm)
    enc = reference_encoder(channels[0], cfg.latent_channels, cfg.patch_stride, rng, cfg.hidden_channels,
                            cfg.stage_norm)
    if lora is not None:
        enc = apply_lora(*enc, lora, rng)
    return Siamese({"shared": enc[0]}, {"shared": enc[1]})


def upsample_cells(probs: torch.Tensor, stride: int, shape: tuple[int, int]) -> torch.Tensor:
    """Nearest upsampling of ``... x h x w`` cells to image pixels."""
    up = probs.repeat_interleave(stride, dim=-2).repeat_interleave(stride, dim=-1)
    return up[..., : shape[0], : shape[1]]


@dataclass(frozen=True)
class StepInputs:
    x1: torch.Tensor
    x2: torch.Tensor
    bar1: torch.Tensor
    bar2: Optional[torch.Tensor]


def prepare_batch(batch: Sequence[ImagePair], cfg: TrainConfig, rng: np.random.Generator) -> StepInputs:
    """Weak augmentation (shared geometry), then strong augmentation per date."""
    t1s, t2s, b1s, b2s = [], [], [], []
    for pair in batch:
        if cfg.weak_augment:
            pair = weak_augment(pair, rng, cfg.crop_augment)
        t1s.append(pair.t1)
        t2s.append(pair.t2)
        if cfg.mode == "mmcd":
            # optical-only augmentation; PCA transfer is skipped against a 1-channel reference
            b1s.append(apply_strong(pair.t1, pair.t2, draw_strong(pair.t1, cfg.augment, rng)))
        else:
            aug = strong_augment(pair, cfg.augment, rng)
            b1s.append(aug.bar_t1)
            b2s.append(aug.bar_t2)
    return StepInputs(stack_images(t1s), stack_images(t2s), stack_images(b1s),
                      stack_images(b2s) if b2s else None)


def compute_losses(model: Siamese, params: dict[str, Params], inputs: StepInputs,
                   cfg: TrainConfig) -> dict[str, torch.Tensor]:
    n = inputs.x1.shape[0]
    shape = tuple(inputs.x1.shape[-2:])
    if model.mode == "mmcd":
        z1 = model.encode(1, torch.cat([inputs.x1, inputs.bar1]), params)
        y1, bar1 = z1[:n], z1[n:]
        y2 = model.encode(2, inputs.x2, params)
        tri = het_triplet(y1, y2, bar1, cfg.triplet)
        info = het_info_nce(y1, y2) if "csc" in cfg.components else None
    else:
        z = model.encode(1, torch.cat([inputs.x1, inputs.x2, inputs.bar1, inputs.bar2]), params)
        y1, y2, bar1, bar2 = z[:n], z[n:2 * n], z[2 * n:3 * n], z[3 * n:]
        tri = triplet_loss(y1, bar1, y2, bar2, cfg.triplet)
        info = info_nce(y1, y2, bar1, bar2) if "csc" in cfg.components else None
    yc = upsample_cells(change_prob(y1, y2, cfg.mapping.eta), model.patch_stride, shape)
    spa = grid_sparsity(yc, cfg.sparsity)
    zero = tri * 0.0
    tri_used = tri if "ctc" in cfg.components else zero
    info_used = info if info is not None else zero
    spa_used = spa if "spa" in cfg.components else zero
    total = total_loss(tri_used, info_used, spa_used, cfg.weights)
    return {"tri": tri_used, "info": info_used, "spa": spa_used, "total": total}


def train_step(state: TrainState, batch: Sequence[ImagePair], cfg: TrainConfig) -> tuple[TrainState, dict]:
    if len(batch) < 2:
        raise ConfigError(f"a training batch needs at least 2 pairs, got {len(batch)}")
    model = state.model
    inputs = prepare_batch(batch, cfg, state.rng)
    flat = model.flat()
    trainable = model.trainable()
    leaves = {k: (v.detach().clone().requires_grad_(True) if k in trainable else v) for k, v in flat.items()}
    params = model.with_flat(leaves).params
    losses = compute_losses(model, params, inputs, cfg)
    values = {k: float(v.detach()) for k, v in losses.items()}
    if not all(math.isfinite(v) for v in values.values()):
        raise TrainingDiverged(f"non-finite loss at iteration {state.iteration}: {values}")

    total_its = max(state.total_iterations, state.iteration + 1)
    lr = lr_at(state.iteration, total_its, cfg)
    if trainable and losses["total"].requires_grad:
        grad_list = torch.autograd.grad(losses["total"], [leaves[k] for k in trainable], allow_unused=True)
        grads = {k: (g if g is not None else torch.zeros_like(leaves[k])) for k, g in zip(trainable, grad_list)}
        new_flat, buffers = sgd_nesterov_step(flat, grads, state.buffers, lr, cfg.momentum)
        state.model = model.with_flat({k: v.detach() for k, v in new_flat.items()})
        state.buffers = buffers
    state.iteration += 1
    record = {"iteration": state.iteration, "lr": lr, **values}
    state.history.append(record)
    return state, record


# -- inference and evaluation ------------------------------------------------------

def predict_probs(model: Siamese, pairs: Sequence[ImagePair], mcfg: MappingConfig = MappingConfig(),
                  batch_size: int = 16) -> list[ChangeProbMap]:
    out = []
    with torch.no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start:start + batch_size]
            y1 = model.encode(1, stack_images([p.t1 for p in chunk]))
            y2 = model.encode(2, stack_images([p.t2 for p in chunk]))
            for a, b in zip(y1, y2):
                out.append(change_prob_map(LatentMap(a, model.patch_stride), LatentMap(b, model.patch_stride), mcfg))
    return out


def predict_masks(model: Siamese, pairs: Sequence[ImagePair], mcfg: MappingConfig = MappingConfig(),
                  thresh: float = 0.5):
    return [binarize(p, thresh, pair.shape) for p, pair in zip(predict_probs(model, pairs, mcfg), pairs)]


def evaluate_f1(model: Siamese, pairs: Sequence[ImagePair], mcfg: MappingConfig = MappingConfig(),
                thresh: float = 0.5) -> float:
    if not pairs:
        raise EmptyDataset("nothing to evaluate")
    preds = predict_masks(model, pairs, mcfg, thresh)
    return pooled_metrics(preds, [p.label for p in pairs]).f1


# -- epoch loop ------------------------------------------------------------------

def _rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_seq, data_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_seq), np.random.default_rng(data_seq)


def init_state(cfg: TrainConfig, channels: tuple[int, int] = (3, 3), model: Optional[Siamese] = None) -> TrainState:
    init_rng, data_rng = _rngs(cfg.seed)
    if model is None:
        model = build_model(cfg, init_rng, channels)
    return TrainState(model=model, rng=data_rng)


def _batches(n_items: int, batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    order = rng.permutation(n_items)
    batches = []
    for start in range(0, n_items, batch_size):
        idx = list(order[start:start + batch_size])
        if len(idx) < batch_size:
            # wrap around so every batch has full size (info_nce needs >= 2)
            idx += list(order[: batch_size - len(idx)])
        batches.append([int(i) for i in idx])
    return batches


def fit(dataset: Sequence[ImagePair], val_dataset: Sequence[ImagePair], cfg: TrainConfig = TrainConfig(),
        model: Optional[Siamese] = None, on_record: Optional[Callable[[dict], None]] = None) -> TrainState:
    """Train for ``cfg.epochs`` epochs, keeping the parameters with the best validation F1."""
    if not dataset:
        raise EmptyDataset("training set is empty")
    channels = (dataset[0].t1.channels, dataset[0].t2.channels)
    state = init_state(cfg, channels, model)
    per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    state.total_iterations = cfg.epochs * per_epoch
    for epoch in range(cfg.epochs):
        for idx in _batches(len(dataset), cfg.batch_size, state.rng):
            _, record = train_step(state, [dataset[i] for i in idx], cfg)
            record["epoch"] = epoch
            if on_record:
                on_record(record)
        if val_dataset:
            f1 = evaluate_f1(state.model, val_dataset, cfg.mapping)
            if f1 > state.best.f1:
                state.best = BestRecord(epoch, f1, {k: v.clone() for k, v in state.model.flat().items()})
            epoch_record = {"epoch": epoch, "iteration": state.iteration, "val_f1": f1,
                            "best_f1": state.best.f1, "best_epoch": state.best.epoch}
            state.history.append(epoch_record)
            log.info("epoch %d val F1 %.4f (best %.4f)", epoch, f1, state.best.f1)
            if on_record:
                on_record(epoch_record)
    if not val_dataset:
        state.best = BestRecord(cfg.epochs - 1, float("nan"), dict(state.model.flat()))
    return state


# -- gradient checking -------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def grad_check(loss_fn: Callable[[Params], torch.Tensor], params: Params, eps: float = 1e-6,
               names: Optional[Iterable[str]] = None, floor: float = 1e-6) -> GradCheckReport:
    """Compare autograd gradients with central differences in float64.

    The relative error per entry is ``|a - n| / max(|a|, |n|, floor)``; the
    report holds the maximum per tensor.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    base = {k: v.detach().to(torch.float64) for k, v in params.items()}
    names = list(names) if names is not None else list(base)
    leaves = {k: (v.clone().requires_grad_(True) if k in names else v) for k, v in base.items()}
    analytic = torch.autograd.grad(loss_fn(leaves), [leaves[k] for k in names], allow_unused=True)
    report = {}
    for name, ga in zip(names, analytic):
        ga = torch.zeros_like(base[name]) if ga is None else ga.detach()
        numeric = torch.zeros_like(base[name])
        flat_view = numeric.view(-1)
        for i in range(base[name].numel()):
            out = []
            for sign in (1.0, -1.0):
                probe = dict(base)
                t = base[name].clone()
                t.view(-1)[i] += sign * eps
                probe[name] = t
                with torch.no_grad():
                    out.append(float(loss_fn(probe)))
            flat_view[i] = (out[0] - out[1]) / (2 * eps)
        denom = torch.maximum(torch.maximum(ga.abs(), numeric.abs()), torch.full_like(ga, floor))
        report[name] = float(((ga - numeric).abs() / denom).max()) if ga.numel() else 0.0
    return GradCheckReport(report)
