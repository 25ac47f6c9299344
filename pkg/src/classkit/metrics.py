"""Saliency evaluation: PR curve, F-beta, MAE and S-measure.

Predictions are maps in [0, 1]; ground truth is binarised at 0.5.  The PR
curve works on the 8-bit quantised prediction, ``floor(S * 255 + 0.5)``,
binarised at ``q >= t`` for every ``t`` in 0..255.  Dataset scores average
per-image precision and recall at each threshold and compute F-beta from
those averages.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError

EPS = 1e-7
# block-SSIM guard: a 1e-7 guard would cost several percent on blocks holding a
# few foreground pixels, so S(G, G) would no longer be ~1
SSIM_EPS = float(np.finfo(np.float64).eps)
BETA_SQ = 0.3
ALPHA = 0.5
THRESHOLDS = np.arange(256)


@dataclass
class PrCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray


@dataclass
class ImageMetrics:
    id: str
    f_max: float
    f_mean: float
    f_adaptive: float
    mae: float
    s_measure: float
    s_region: float
    s_object: float
    curve: PrCurve = field(repr=False)


@dataclass
class MetricsReport:
    f_max: float
    f_mean: float
    f_adaptive: float
    mae: float
    s_measure: float
    s_region: float
    s_object: float
    curve: PrCurve = field(repr=False)
    images: list[ImageMetrics] = field(default_factory=list, repr=False)

    def summary(self) -> dict[str, float]:
        return {"f_max": self.f_max, "f_mean": self.f_mean, "f_adaptive": self.f_adaptive,
                "mae": self.mae, "s_measure": self.s_measure, "s_region": self.s_region,
                "s_object": self.s_object}


def _prepare(s, g) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(s, dtype=np.float64)
    g = np.asarray(g)
    if s.shape != g.shape:
        raise DimensionError(f"prediction {s.shape} and ground truth {g.shape} differ in shape")
    s = np.squeeze(s)
    g = np.squeeze(g) > 0.5
    return s, g


def quantize(s) -> np.ndarray:
    """Map [0, 1] reals to bytes by round-half-up of ``s * 255``, clamped."""
    return np.clip(np.floor(np.asarray(s, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.int64)


def mae(s, g) -> float:
    s, g = _prepare(s, g)
    return float(np.mean(np.abs(s - g)))


def f_measure(precision, recall, beta_sq: float = BETA_SQ):
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    out = (1.0 + beta_sq) * p * r / (beta_sq * p + r + EPS)
    return float(out) if out.ndim == 0 else out


def pr_curve(s, g) -> PrCurve:
    """Precision/recall of ``q >= t`` for t = 0..255.

    ``s`` may already be quantised (integer dtype) or a real map in [0, 1].
    """
    arr = np.asarray(s)
    q = arr.astype(np.int64) if np.issubdtype(arr.dtype, np.integer) else quantize(arr)
    _, gt = _prepare(q, g)
    q = np.squeeze(q)
    fg_hist = np.bincount(q[gt], minlength=256)[:256]
    bg_hist = np.bincount(q[~gt], minlength=256)[:256]
    tp = np.cumsum(fg_hist[::-1])[::-1].astype(np.float64)
    fp = np.cumsum(bg_hist[::-1])[::-1].astype(np.float64)
    fn = gt.sum() - tp
    precision = tp / (tp + fp + EPS)
    recall = tp / (tp + fn + EPS)
    return PrCurve(THRESHOLDS.copy(), precision, recall)


def adaptive_f(s, g, beta_sq: float = BETA_SQ) -> float:
    """F-beta at the per-image threshold ``min(2 * mean(q), 255)``."""
    q = quantize(s)
    _, gt = _prepare(s, g)
    q = np.squeeze(q)
    thr = min(2.0 * q.mean(), 255.0)
    pred = q >= thr
    tp = float(np.sum(pred & gt))
    p = tp / (pred.sum() + EPS)
    r = tp / (gt.sum() + EPS)
    return f_measure(p, r, beta_sq)


# -- S-measure ----------------------------------------------------------------

def _object_score(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    mean = x.mean()
    sd = x.std(ddof=1) if x.size > 1 else 0.0
    return 2.0 * mean / (mean * mean + 1.0 + sd + EPS)


def s_object(s: np.ndarray, g: np.ndarray) -> float:
    u = g.mean()
    return u * _object_score(s[g]) + (1.0 - u) * _object_score(1.0 - s[~g])


def _centroid(g: np.ndarray) -> tuple[int, int]:
    h, w = g.shape
    if not g.any():
        return int(np.floor(w / 2 + 0.5)), int(np.floor(h / 2 + 0.5))
    rows, cols = np.nonzero(g)
    # rounded half up; +1 so that the split keeps the centroid row/column in the first block
    return int(np.floor(cols.mean() + 0.5)) + 1, int(np.floor(rows.mean() + 0.5)) + 1


def _block_ssim(x: np.ndarray, y: np.ndarray) -> float:
    n = x.size
    mx, my = x.mean(), y.mean()
    denom = max(n - 1, 1)
    vx = np.sum((x - mx) ** 2) / denom
    vy = np.sum((y - my) ** 2) / denom
    cxy = np.sum((x - mx) * (y - my)) / denom
    numer = 4.0 * mx * my * cxy
    bottom = (mx * mx + my * my) * (vx + vy)
    if numer != 0:
        return numer / (bottom + SSIM_EPS)
    return 1.0 if bottom == 0 else 0.0


def s_region(s: np.ndarray, g: np.ndarray) -> float:
    h, w = g.shape
    cx, cy = _centroid(g)
    total = float(h * w)
    score = 0.0
    for rows in (slice(0, cy), slice(cy, h)):
        for cols in (slice(0, cx), slice(cx, w)):
            bs, bg = s[rows, cols], g[rows, cols].astype(np.float64)
            if bs.size == 0:
                continue
            score += bs.size / total * _block_ssim(bs, bg)
    return score


def s_measure(s, g, alpha: float = ALPHA) -> tuple[float, float, float]:
    """Return ``(s, s_region, s_object)``."""
    s, g = _prepare(s, g)
    y = g.mean()
    if y == 0:
        v = 1.0 - s.mean()
        return v, v, v
    if y == 1:
        v = s.mean()
        return v, v, v
    sr, so = s_region(s, g), s_object(s, g)
    v = min(max(alpha * sr + (1.0 - alpha) * so, 0.0), 1.0)
    return v, sr, so


# -- aggregation --------------------------------------------------------------

def evaluate_image(s, g, image_id: str = "0") -> ImageMetrics:
    s_arr, g_arr = np.asarray(s, dtype=np.float64), np.asarray(g)
    if s_arr.shape != g_arr.shape:
        raise DimensionError(f"{image_id}: prediction {s_arr.shape} and ground truth {g_arr.shape} differ in shape")
    curve = pr_curve(s_arr, g_arr)
    f_curve = f_measure(curve.precision, curve.recall)
    sm, sr, so = s_measure(s_arr, g_arr)
    return ImageMetrics(image_id, float(f_curve.max()), float(f_curve.mean()), adaptive_f(s_arr, g_arr),
                        mae(s_arr, g_arr), sm, sr, so, curve)


def evaluate_dataset(pairs: Sequence) -> MetricsReport:
    """Average per-image metrics over ``(S, G)`` or ``(id, S, G)`` items.

    Items are reduced in sorted-id order, so the result does not depend on
    the order they are given in.
    """
    items = []
    for k, item in enumerate(pairs):
        if len(item) == 3:
            items.append((str(item[0]), item[1], item[2]))
        else:
            items.append((f"{k:06d}", item[0], item[1]))
    if not items:
        raise ContractError("evaluate_dataset needs at least one (S, G) pair")
    items.sort(key=lambda it: it[0])
    images = [evaluate_image(s, g, image_id) for image_id, s, g in items]
    n = len(images)
    precision = np.sum([im.curve.precision for im in images], axis=0) / n
    recall = np.sum([im.curve.recall for im in images], axis=0) / n
    f_curve = f_measure(precision, recall)

    def avg(attr):
        return float(sum(getattr(im, attr) for im in images) / n)

    return MetricsReport(float(f_curve.max()), float(f_curve.mean()), avg("f_adaptive"), avg("mae"),
                         avg("s_measure"), avg("s_region"), avg("s_object"),
                         PrCurve(THRESHOLDS.copy(), precision, recall), images)


METRIC_COLUMNS = ["id", "f_max", "f_mean", "f_adaptive", "mae", "s", "s_r", "s_o"]


def write_metrics_csv(path, report: MetricsReport) -> None:
    """One row per image plus a final ``__summary__`` row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for im in report.images:
            writer.writerow([im.id, repr(im.f_max), repr(im.f_mean), repr(im.f_adaptive), repr(im.mae),
                             repr(im.s_measure), repr(im.s_region), repr(im.s_object)])
        writer.writerow(["__summary__", repr(report.f_max), repr(report.f_mean), repr(report.f_adaptive),
                         repr(report.mae), repr(report.s_measure), repr(report.s_region), repr(report.s_object)])


def write_pr_csv(path, curve: PrCurve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "precision", "recall"])
        for t, p, r in zip(curve.thresholds, curve.precision, curve.recall):
            writer.writerow([int(t), repr(float(p)), repr(float(r))])
