"""Accuracy metrics, the CVA baseline and alpha/beta sweeps."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .core import BinaryMask, ChangeProbMap, ImagePair, ShapeMismatch


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


class Metrics(NamedTuple):
    oa: float
    precision: float
    recall: float
    f1: float


def _bits(x) -> np.ndarray:
    return x.bits if isinstance(x, BinaryMask) else np.asarray(x, dtype=bool)


def confusion(pred, truth) -> ConfusionCounts:
    p, t = _bits(pred), _bits(truth)
    if p.shape != t.shape:
        raise ShapeMismatch(f"prediction {p.shape} and truth {t.shape} differ")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


def metrics(c: ConfusionCounts) -> Metrics:
    """OA, precision, recall and F1 of the changed class; empty ratios are 0."""
    if c.total <= 0:
        raise ValueError("metrics need at least one pixel")
    oa = (c.tp + c.tn) / c.total
    pre = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    rec = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f1 = 2 * pre * rec / (pre + rec) if pre + rec else 0.0
    return Metrics(oa, pre, rec, f1)


def pooled_metrics(preds: Iterable, truths: Iterable) -> Metrics:
    """Metrics over the pixel-wise sum of confusion counts of a whole split."""
    total = ConfusionCounts()
    for p, t in zip(preds, truths):
        total = total + confusion(p, t)
    return metrics(total)


def cva_baseline(pair: ImagePair) -> ChangeProbMap:
    """Change-vector magnitude, min-max normalised to [0, 1]."""
    mag = np.linalg.norm(pair.t2.pixels - pair.t1.pixels, axis=2)
    lo, hi = mag.min(), mag.max()
    if hi - lo <= 0:
        return ChangeProbMap(np.zeros_like(mag), 1)
    return ChangeProbMap((mag - lo) / (hi - lo), 1)


def best_threshold_f1(prob_maps: Sequence[np.ndarray], truths: Sequence,
                      thresholds: Sequence[float] = tuple(np.linspace(0.01, 0.99, 99))) -> tuple[float, float]:
    """Highest pooled F1 over ``thresholds`` (strict ``>``); returns (threshold, F1)."""
    best = (float(thresholds[0]), -1.0)
    for th in thresholds:
        f1 = pooled_metrics((p > th for p in prob_maps), truths).f1
        if f1 > best[1]:
            best = (float(th), f1)
    return best


class SweepRow(NamedTuple):
    alpha: float
    beta: float
    mean_f1: float
    trial_f1: tuple[float, ...]


def sweep(alphas: Sequence[float], betas: Sequence[float],
          run: Callable[[float, float, int], float], seeds: Sequence[int] = (0, 1, 2)) -> list[SweepRow]:
    """Evaluate ``run(alpha, beta, seed) -> F1`` on every grid cell, averaged over ``seeds``."""
    if not alphas or not betas:
        raise ValueError("sweep grid must be non-empty")
    if len(seeds) < 3:
        raise ValueError("sweep needs at least 3 trials per cell")
    rows = []
    for a, b in itertools.product(alphas, betas):
        scores = tuple(float(run(a, b, s)) for s in seeds)
        rows.append(SweepRow(float(a), float(b), float(np.mean(scores)), scores))
    return rows


def format_sweep(rows: Sequence[SweepRow], sep: str = "\t") -> str:
    lines = [sep.join(["alpha", "beta", "mean_f1", "trials"])]
    for r in rows:
        lines.append(sep.join([f"{r.alpha:g}", f"{r.beta:g}", f"{r.mean_f1:.6f}",
                               ",".join(f"{v:.6f}" for v in r.trial_f1)]))
    return "\n".join(lines) + "\n"
