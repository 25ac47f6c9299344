"""Pixel, region and object level supervision and their multi-level weighting.

Maps are either a single map (any shape; 2-D for the region loss) or an
NCHW batch; batched losses are averaged over the batch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor, as_tensor, clip, log, reduce_mean, reduce_sum, window_reduce

EPS = 1e-7
BCE_CLAMP = 1e-7
DEFAULT_BETA_SQ = 0.3
TERMS = ("pixel", "region", "object")

# reference window at a 64x64 map; scaled proportionally for other sizes
REFERENCE_SIDE = 64
REFERENCE_WINDOW = 11
REFERENCE_STRIDE = 5


@dataclass(frozen=True)
class RegionConfig:
    window: int = REFERENCE_WINDOW
    stride: int = REFERENCE_STRIDE

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError(f"region window must be >= 1, got {self.window}")
        if not 1 <= self.stride <= self.window:
            raise ConfigError(f"region stride must be in [1, window], got {self.stride}")

    @classmethod
    def for_size(cls, side: int, window: int = REFERENCE_WINDOW, stride: int = REFERENCE_STRIDE,
                 reference: int = REFERENCE_SIDE) -> "RegionConfig":
        """Scale a window/stride chosen for ``reference``-pixel maps to ``side`` pixels."""
        scale = side / reference
        w = max(1, min(side, int(np.floor(window * scale + 0.5))))
        s = max(1, min(w, int(np.floor(stride * scale + 0.5))))
        return cls(w, s)


@dataclass
class LossBreakdown:
    pixel: float
    region: float
    object: float
    total: float
    per_level: list[tuple[int, float, float]] = field(default_factory=list)
    final: float = 0.0
    loss: Tensor | None = field(default=None, repr=False, compare=False)

    def csv_row(self, step: int, lr: float) -> list:
        return [step, repr(lr), repr(self.pixel), repr(self.region), repr(self.object),
                repr(self.total), repr(self.final)] + [repr(t) for _, t, _ in self.per_level]


class ObjectTerms(NamedTuple):
    loss: Tensor
    precision: np.ndarray
    recall: np.ndarray
    f: np.ndarray


def _as_batch(s: Tensor, g, min_ndim: int = 1) -> tuple[Tensor, np.ndarray]:
    s = as_tensor(s)
    g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
    if s.shape != g.shape:
        raise DimensionError(f"prediction {s.shape} and ground truth {g.shape} differ in shape")
    if s.ndim < min_ndim or s.ndim > 4:
        raise DimensionError(f"expected {min_ndim} to 4 axes, got shape {s.shape}")
    if s.ndim < 4:
        s = s.reshape((1,) * (4 - s.ndim) + s.shape)
        g = g.reshape(s.shape)
    return s, g


def pixel_bce(s: Tensor, g) -> Tensor:
    """Mean binary cross-entropy; ``s`` is clamped to [1e-7, 1-1e-7] inside the log."""
    s, g = _as_batch(s, g)
    sc = clip(s, BCE_CLAMP, 1.0 - BCE_CLAMP)
    ll = g * log(sc) + (1.0 - g) * log(1.0 - sc)
    return -reduce_mean(ll)


def region_ssd(s: Tensor, g, cfg: RegionConfig = RegionConfig()) -> Tensor:
    """Average over sliding windows of squared mean gap plus squared std gap."""
    s, g = _as_batch(s, g, min_ndim=2)
    h, w = s.shape[-2:]
    if cfg.window > h or cfg.window > w:
        raise ConfigError(f"region window {cfg.window} does not fit a {h}x{w} map")
    gt = Tensor(g)
    mean_gap = window_reduce(s, "mean", cfg.window, cfg.stride) - window_reduce(gt, "mean", cfg.window, cfg.stride)
    std_gap = window_reduce(s, "std", cfg.window, cfg.stride) - window_reduce(gt, "std", cfg.window, cfg.stride)
    return reduce_mean(mean_gap * mean_gap + std_gap * std_gap)


def object_fmeasure_loss(s: Tensor, g, beta_sq: float = DEFAULT_BETA_SQ) -> ObjectTerms:
    """``1 - F_beta`` of the soft precision/recall built from probabilistic counts.

    The F_beta denominator is used as-is when positive; it is zero only when
    precision and recall are both zero, where F_beta is defined as 0.
    """
    if beta_sq <= 0:
        raise ContractError(f"beta_sq must be positive, got {beta_sq}")
    s, g = _as_batch(s, g)
    axes = tuple(range(1, s.ndim))
    tp = reduce_sum(s * g, axis=axes)
    precision = tp / (reduce_sum(s, axis=axes) + EPS)
    recall = tp / (g.sum(axis=axes) + EPS)
    numer = (1.0 + beta_sq) * precision * recall
    denom = beta_sq * precision + recall
    safe = np.where(denom.data > 0, 0.0, 1.0)
    f = numer / (denom + safe)
    loss = 1.0 - reduce_mean(f)
    return ObjectTerms(loss, precision.data.copy(), recall.data.copy(), f.data.copy())


def _level_terms(s: Tensor, g, cfg: RegionConfig, terms: Sequence[str], beta_sq: float):
    pixel = pixel_bce(s, g) if "pixel" in terms else Tensor(0.0)
    region = region_ssd(s, g, cfg) if "region" in terms else Tensor(0.0)
    obj = object_fmeasure_loss(s, g, beta_sq).loss if "object" in terms else Tensor(0.0)
    total = pixel + region + obj
    return pixel, region, obj, total


def combined_loss(s: Tensor, g, cfg: RegionConfig = RegionConfig(), terms: Sequence[str] = TERMS,
                  beta_sq: float = DEFAULT_BETA_SQ) -> LossBreakdown:
    """Single-level ``pixel + region + object``."""
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise ContractError(f"unknown loss terms {sorted(unknown)}")
    pixel, region, obj, total = _level_terms(s, g, cfg, terms, beta_sq)
    t = total.item()
    return LossBreakdown(pixel.item(), region.item(), obj.item(), t, [(1, t, 1.0)], t, total)


def level_weight(i: int) -> float:
    return 1.0 / 2 ** (i - 1)


def multi_level_loss(levels: Sequence[tuple[Tensor, object]], cfg: RegionConfig = RegionConfig(),
                     terms: Sequence[str] = TERMS, beta_sq: float = DEFAULT_BETA_SQ) -> LossBreakdown:
    """Weighted sum over levels, level i (1-based, final prediction first) weighted 1/2^(i-1).

    The pixel/region/object/total fields describe level 1.
    """
    if not levels:
        raise ContractError("multi_level_loss needs at least one level")
    if len(levels) > 4:
        raise ContractError(f"at most 4 supervision levels, got {len(levels)}")
    final = None
    per_level = []
    first = None
    for i, (s, g) in enumerate(levels, start=1):
        bd = combined_loss(s, g, cfg, terms, beta_sq)
        first = first or bd
        weighted = level_weight(i) * bd.loss
        final = weighted if final is None else final + weighted
        per_level.append((i, bd.total, level_weight(i)))
    return LossBreakdown(first.pixel, first.region, first.object, first.total, per_level, final.item(), final)


def recompute_final(per_level: Sequence[tuple[int, float, float]]) -> float:
    """Re-evaluate the weighted sum from logged per-level totals, in logging order."""
    acc = None
    for i, total, _ in per_level:
        term = level_weight(i) * total
        acc = term if acc is None else acc + term
    return acc


LOG_HEADER = ["step", "lr", "pixel", "region", "object", "total", "final"]


def write_loss_log(path, rows: Sequence[tuple[int, float, LossBreakdown]]) -> None:
    """One CSV row per training step; per-level totals follow the fixed columns."""
    levels = max((len(bd.per_level) for _, _, bd in rows), default=0)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER + [f"level_{i}" for i in range(1, levels + 1)])
        for step, lr, bd in rows:
            writer.writerow(bd.csv_row(step, lr))
