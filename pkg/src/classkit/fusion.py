"""Decoder stages and saliency heads."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .nn import Conv2d, ConvBNReLU, Module
from .tensor import Tensor, bilinear_resize, concat_channels, sigmoid


def _check_stage_inputs(low: Tensor, high: Tensor, prev: Tensor, channels: int) -> None:
    for name, t in (("F_l_out", low), ("F_h_out", high), ("D_prev", prev)):
        if t.ndim != 4 or t.shape[1] != channels:
            raise DimensionError(f"{name} must be NCHW with {channels} channels, got {t.shape}")
    h, w = low.shape[2:]
    if prev.shape[2:] != ((h + 1) // 2, (w + 1) // 2):
        raise DimensionError(f"D_prev extent {prev.shape[2:]} is not half of {low.shape[2:]}")


class FeatureFusion(Module):
    """concat(3C) -> 1x1 -> 3x3 -> 3x3 (each BN+ReLU), then a sigmoid gate.

    ``D = refined * sigmoid(gate(refined))``; with ``residual`` the refined
    features are added back on top of the gated ones.
    """

    def __init__(self, channels: int, rng: np.random.Generator, residual: bool = False):
        self.channels = channels
        self.compress = ConvBNReLU(3 * channels, channels, 1, rng)
        self.refine1 = ConvBNReLU(channels, channels, 3, rng)
        self.refine2 = ConvBNReLU(channels, channels, 3, rng)
        self.gate_conv = Conv2d(channels, channels, 1, rng)
        self.residual = residual

    def forward(self, low: Tensor, high: Tensor, prev: Tensor) -> Tensor:
        _check_stage_inputs(low, high, prev, self.channels)
        h, w = low.shape[2:]
        x = concat_channels([low, bilinear_resize(high, h, w), bilinear_resize(prev, h, w)])
        refined = self.refine2(self.refine1(self.compress(x)))
        out = refined * sigmoid(self.gate_conv(refined))
        return out + refined if self.residual else out


class SumFusion(Module):
    """Ablation baseline: add the three (resized) inputs, then one 3x3 BN+ReLU."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.channels = channels
        self.refine = ConvBNReLU(channels, channels, 3, rng)

    def forward(self, low: Tensor, high: Tensor, prev: Tensor) -> Tensor:
        _check_stage_inputs(low, high, prev, self.channels)
        h, w = low.shape[2:]
        return self.refine(low + bilinear_resize(high, h, w) + bilinear_resize(prev, h, w))


class Head(Module):
    """1x1 conv to one channel, bilinear upsample, sigmoid."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.predict_conv = Conv2d(channels, 1, 1, rng)

    def forward(self, d: Tensor, target_h: int, target_w: int) -> Tensor:
        if d.ndim != 4:
            raise DimensionError(f"head expects NCHW input, got {d.shape}")
        if target_h < d.shape[2] or target_w < d.shape[3]:
            raise DimensionError(f"head target {target_h}x{target_w} is smaller than input {d.shape[2:]}")
        return sigmoid(bilinear_resize(self.predict_conv(d), target_h, target_w))


def ffm_forward(low: Tensor, high: Tensor, prev: Tensor, state: FeatureFusion) -> Tensor:
    return state(low, high, prev)


def head_forward(d: Tensor, target_h: int, target_w: int, state: Head) -> Tensor:
    return state(d, target_h, target_w)
