"""SGD training loop with warm-up/linear-decay learning rates.

Two parameter groups share one schedule shape: the encoder ("backbone")
and everything else, each with its own peak rate.  Every epoch draws its
shuffling, flips and scales from ``default_rng([seed, epoch])``, so a run
resumed from an epoch checkpoint retraces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import SaliencySample
from .errors import ConfigError, ContractError, TrainingDiverged
from .losses import TERMS, LossBreakdown, RegionConfig, level_weight, multi_level_loss
from .metrics import MetricsReport, evaluate_dataset
from .model import ClassMini, load_checkpoint, save_checkpoint
from .nn import ParamSet
from .tensor import Tensor, interpolation_matrix, no_grad

DECAY_EXEMPT_LEAVES = ("alpha", "beta", "bias", "gamma", "shift")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr_max_backbone: float = 0.005
    lr_max_rest: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0005
    warmup_fraction: float = 0.1
    seed: int = 0
    region_window: int = 11
    region_stride: int = 5
    scales: tuple[float, ...] = (0.75, 1.0, 1.25)
    flip: bool = True
    loss_terms: tuple[str, ...] = TERMS
    supervision_levels: int = 4

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        for name in ("lr_max_backbone", "lr_max_rest"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 < self.warmup_fraction < 1:
            raise ConfigError(f"warmup_fraction must be in (0, 1), got {self.warmup_fraction}")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ConfigError(f"scales must be positive, got {self.scales}")
        if not self.loss_terms or set(self.loss_terms) - set(TERMS):
            raise ConfigError(f"loss_terms must be a nonempty subset of {TERMS}, got {self.loss_terms}")
        if not 1 <= self.supervision_levels <= 4:
            raise ConfigError(f"supervision_levels must be in 1..4, got {self.supervision_levels}")
        RegionConfig(self.region_window, self.region_stride)

    def region_for(self, side: int) -> RegionConfig:
        return RegionConfig.for_size(side, self.region_window, self.region_stride)

    def check_scales(self, side: int) -> None:
        for s in self.scales:
            extent = side * s
            if extent != int(extent) or int(extent) % 16:
                raise ConfigError(f"scale {s} maps {side}px to {extent}, not a multiple of 16")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        data = dict(data)
        for key in ("scales", "loss_terms"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


# -- schedule and optimiser --------------------------------------------------

def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> tuple[float, float]:
    """``(lr_backbone, lr_rest)``: linear ramp to the peak, then linear decay to 0 at ``total_steps``."""
    if not 0 <= step < total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps})")
    warm = cfg.warmup_fraction * total_steps
    if step < warm:
        factor = step / warm
    else:
        factor = (total_steps - step) / (total_steps - warm)
    return cfg.lr_max_backbone * factor, cfg.lr_max_rest * factor


def is_decay_exempt(name: str) -> bool:
    """Attention gains, norm scale/shift and biases take no weight decay."""
    return name.rsplit(".", 1)[-1] in DECAY_EXEMPT_LEAVES


def sgd_step(params: ParamSet, velocity: dict[str, np.ndarray], lr: float | Callable[[str], float],
             momentum: float, weight_decay: float,
             exempt: Callable[[str], bool] = is_decay_exempt) -> None:
    """In place: ``v = m*v + g + wd*p``; ``p -= lr*v``.  ``lr`` may map a name to its rate."""
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name} has no gradient")
    for name, p in params.items():
        g = p.grad
        if weight_decay and not exempt(name):
            g = g + weight_decay * p.data
        v = velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        velocity[name] = v
        rate = lr(name) if callable(lr) else lr
        p.data -= rate * v


# -- augmentation ------------------------------------------------------------

def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)


def resize_pair(image: np.ndarray, mask: np.ndarray, side_h: int, side_w: int) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear for the image, nearest for the mask (keeps it binary)."""
    h, w = image.shape[-2:]
    if (h, w) == (side_h, side_w):
        return image, mask
    mh, mw = interpolation_matrix(h, side_h), interpolation_matrix(w, side_w)
    image = np.matmul(np.matmul(mh, image), mw.T)
    mask = mask[..., nearest_indices(h, side_h), :][..., nearest_indices(w, side_w)]
    return image, mask


def augment(sample: SaliencySample, rng: np.random.Generator, scales: Sequence[float] = (0.75, 1.0, 1.25),
            scale: float | None = None, flip: bool | None = None) -> SaliencySample:
    """Random horizontal flip (p = 0.5) and rescale, applied to image and mask together.

    ``scale`` / ``flip`` override the random draws; a forced value consumes no randomness.
    """
    if flip is None:
        flip = bool(rng.random() < 0.5)
    if scale is None:
        scale = scales[int(rng.integers(len(scales)))]
    image, mask = sample.image, sample.mask
    if flip:
        image, mask = image[..., ::-1], mask[..., ::-1]
    h, w = image.shape[-2:]
    image, mask = resize_pair(image, mask, int(round(h * scale)), int(round(w * scale)))
    return SaliencySample(sample.id, np.ascontiguousarray(image), np.ascontiguousarray(mask), sample.meta)


# -- logging ---------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    epoch: int
    lr_backbone: float
    lr_rest: float
    loss: LossBreakdown


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)
    validation: list[MetricsReport | None] = field(default_factory=list)

    def lr_trace(self) -> list[tuple[float, float]]:
        return [(r.lr_backbone, r.lr_rest) for r in self.steps]

    def write_csv(self, path) -> None:
        levels = max((len(r.loss.per_level) for r in self.steps), default=0)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "epoch", "lr_backbone", "lr_rest", "pixel", "region", "object",
                             "total", "final"] + [f"level_{i}" for i in range(1, levels + 1)])
            for r in self.steps:
                bd = r.loss
                writer.writerow([r.step, r.epoch, repr(r.lr_backbone), repr(r.lr_rest), repr(bd.pixel),
                                 repr(bd.region), repr(bd.object), repr(bd.total), repr(bd.final)]
                                + [repr(t) for _, t, _ in bd.per_level])

    @staticmethod
    def read_steps(path) -> list[StepRecord]:
        records = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            n_levels = sum(1 for h in header if h.startswith("level_"))
            for row in reader:
                levels = [(i, float(row[9 + i - 1]), level_weight(i)) for i in range(1, n_levels + 1)]
                bd = LossBreakdown(float(row[4]), float(row[5]), float(row[6]), float(row[7]), levels,
                                   float(row[8]))
                records.append(StepRecord(int(row[0]), int(row[1]), float(row[2]), float(row[3]), bd))
        return records

    def write_epochs(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mean_final", "val_f_max", "val_mae", "val_s"])
            for e, loss in enumerate(self.epoch_loss):
                rep = self.validation[e] if e < len(self.validation) else None
                vals = ["", "", ""] if rep is None else [repr(rep.f_max), repr(rep.mae), repr(rep.s_measure)]
                writer.writerow([e, repr(loss)] + vals)


# -- loop ------------------------------------------------------------------

def _stack(samples: Sequence[SaliencySample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


def predict(model: ClassMini, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Final-head maps, eval mode, without building a graph; returns (N, 1, H, W)."""
    was_training = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for start in range(0, len(images), batch_size):
                preds, _ = model(Tensor(images[start:start + batch_size]))
                out.append(preds[0].data)
    finally:
        model.train(was_training)
    return np.concatenate(out)


def validate(model: ClassMini, samples: Sequence[SaliencySample], batch_size: int = 16) -> MetricsReport:
    images, masks = _stack(samples)
    preds = predict(model, images, batch_size)
    return evaluate_dataset([(s.id, preds[k, 0], masks[k, 0]) for k, s in enumerate(samples)])


def _group_lr(model: ClassMini, lrs: tuple[float, float]) -> Callable[[str], float]:
    backbone, rest = lrs
    return lambda name: backbone if model.is_backbone(name) else rest


def _dump_batch(out_dir, step: int, ids, images, masks) -> Path | None:
    if out_dir is None:
        return None
    path = Path(out_dir) / f"diverged_step{step}.npz"
    np.savez(path, ids=np.array(ids), images=images, masks=masks)
    return path


def train_loop(model: ClassMini, train_set: Sequence[SaliencySample], val_set: Sequence[SaliencySample] | None,
               cfg: TrainConfig, out_dir=None, resume: bool = False,
               on_epoch: Callable[[int, TrainLog], None] | None = None) -> tuple[ClassMini, TrainLog]:
    """Train ``model`` in place.

    With ``out_dir`` set, ``latest.clsk``, ``train_log.csv`` and ``epochs.csv``
    are rewritten after every epoch; ``resume`` continues from ``latest.clsk``.
    """
    if not train_set:
        raise ContractError("training set is empty")
    side_h, side_w = train_set[0].image.shape[-2:]
    cfg.check_scales(min(side_h, side_w))
    n = len(train_set)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * per_epoch
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    # heads left out of the loss get no gradient and stay frozen
    unsupervised = set(ClassMini.HEADS[cfg.supervision_levels:])
    params = ParamSet((name, p) for name, p in model.named_parameters() if name.split(".")[0] not in unsupervised)
    velocity: dict[str, np.ndarray] = {}
    log = TrainLog()
    start_epoch = 0
    if resume:
        if out_dir is None or not (out_dir / "latest.clsk").is_file():
            raise ContractError("resume needs an output directory holding latest.clsk")
        restored, state, extra = load_checkpoint(out_dir / "latest.clsk", expected=model.config)
        if TrainConfig.from_dict(state["train_config"]) != cfg:
            raise ContractError("checkpoint was written with a different training config")
        model.load_state_arrays(restored.state_arrays())
        velocity = {k[len("velocity/"):]: v.copy() for k, v in extra.items() if k.startswith("velocity/")}
        start_epoch = state["epoch"] + 1
        log.epoch_loss = list(state["epoch_loss"])
        log.validation = [None] * len(log.epoch_loss)
        if (out_dir / "train_log.csv").is_file():
            log.steps = TrainLog.read_steps(out_dir / "train_log.csv")

    model.train()
    for epoch in range(start_epoch, cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        epoch_sum = 0.0
        for b in range(per_epoch):
            step = epoch * per_epoch + b
            chosen = [train_set[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            scale = cfg.scales[int(rng.integers(len(cfg.scales)))]
            batch = [augment(s, rng, scale=scale, flip=None if cfg.flip else False) for s in chosen]
            images, masks = _stack(batch)
            preds, _ = model(Tensor(images))
            levels = [(p, masks) for p in preds[:cfg.supervision_levels]]
            bd = multi_level_loss(levels, cfg.region_for(images.shape[-1]), cfg.loss_terms)
            ids = [s.id for s in chosen]
            if not np.isfinite(bd.final):
                dump = _dump_batch(out_dir, step, ids, images, masks)
                raise TrainingDiverged(f"non-finite loss at step {step} (batch {ids})", ids, dump)
            params.zero_grad()
            bd.loss.backward()
            lrs = lr_at(step, total, cfg)
            sgd_step(params, velocity, _group_lr(model, lrs), cfg.momentum, cfg.weight_decay)
            bd.loss = None
            log.steps.append(StepRecord(step, epoch, lrs[0], lrs[1], bd))
            epoch_sum += bd.final
        log.epoch_loss.append(epoch_sum / per_epoch)
        log.validation.append(validate(model, val_set) if val_set else None)
        if out_dir is not None:
            state = {"epoch": epoch, "step": (epoch + 1) * per_epoch, "epoch_loss": log.epoch_loss,
                     "train_config": cfg.to_dict()}
            save_checkpoint(out_dir / "latest.clsk", model, state,
                            {f"velocity/{k}": v for k, v in velocity.items()})
            log.write_csv(out_dir / "train_log.csv")
            log.write_epochs(out_dir / "epochs.csv")
        if on_epoch is not None:
            on_epoch(epoch, log)
    return model, log


def config_json(cfg: TrainConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
