"""Cross-level attention: position attention and channel attention.

Position attention lets every high-level position attend over all low-level
positions (query from the high-level map, key/value from the low-level map).
Channel attention lets every low-level channel attend over the channels of
the upsampled high-level map.  Both blend their result in through a learned
scalar that starts at exactly zero, so a fresh module is the identity.

Before the attention sums are formed, the attended axis is put into a
canonical order (lexicographic on the raw feature columns).  The sums over
that axis are then evaluated in the same order for any permutation of the
input, which makes the permutation invariances hold bit-for-bit rather than
to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .nn import Conv2d, Module, parameter
from .tensor import Tensor, bilinear_resize, matmul, permute_along, softmax_rows, swap_last


@dataclass
class AttentionMaps:
    position_map: Tensor | None  # (N, N_h, N_l), rows sum to 1
    channel_map: Tensor | None  # (N, C_l, C_h), rows sum to 1


def canonical_order(items: np.ndarray) -> np.ndarray:
    """Per-sample order of ``items[n, :, m]`` columns m, sorted lexicographically.

    ``items`` has shape (N, K, M); the result has shape (N, M).  Equal
    columns are interchangeable, so ties do not affect downstream sums.
    """
    return np.stack([np.lexsort(sample[::-1]) for sample in items])


def _check_pair(f_high: Tensor, f_low: Tensor) -> None:
    if f_high.ndim != 4 or f_low.ndim != 4:
        raise DimensionError(f"attention expects NCHW inputs, got {f_high.shape} and {f_low.shape}")
    if f_high.shape[0] != f_low.shape[0] or f_high.shape[1] != f_low.shape[1]:
        raise DimensionError(
            f"attention needs equal batch and channel counts, got {f_high.shape} and {f_low.shape}"
        )


class PositionAttention(Module):
    """Query/key/value 1x1 convolutions keep the channel count; alpha starts at 0."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.query_conv = Conv2d(channels, channels, 1, rng)
        self.key_conv = Conv2d(channels, channels, 1, rng)
        self.value_conv = Conv2d(channels, channels, 1, rng)
        self.alpha = parameter(0.0)

    def forward(self, f_high: Tensor, f_low: Tensor) -> tuple[Tensor, Tensor]:
        _check_pair(f_high, f_low)
        n, c, hh, wh = f_high.shape
        hl, wl = f_low.shape[2:]
        n_low = hl * wl

        flat_low = f_low.reshape(n, c, n_low)
        order = canonical_order(flat_low.data)
        low = permute_along(flat_low, order[:, None, :], axis=2).reshape(n, c, 1, n_low)

        query = self.query_conv(f_high).reshape(n, c, hh * wh)
        key = self.key_conv(low).reshape(n, c, n_low)
        value = self.value_conv(low).reshape(n, c, n_low)

        attn = softmax_rows(matmul(swap_last(query), key))  # (n, N_h, N_l)
        attended = matmul(value, swap_last(attn))  # (n, c, N_h)
        out = self.alpha * attended.reshape(n, c, hh, wh) + f_high

        inverse = np.argsort(order, axis=1, kind="stable")
        position_map = permute_along(attn, inverse[:, None, :], axis=2)
        return out, position_map


class ChannelAttention(Module):
    """Reshape-only branches; beta starts at 0."""

    def __init__(self):
        self.beta = parameter(0.0)

    def forward(self, f_high: Tensor, f_low: Tensor) -> tuple[Tensor, Tensor]:
        _check_pair(f_high, f_low)
        n, c, hh, wh = f_high.shape
        hl, wl = f_low.shape[2:]
        if hl < hh or wl < wh:
            raise ContractError(f"low-level map {f_low.shape} is smaller than high-level map {f_high.shape}")
        n_low = hl * wl

        order = canonical_order(np.swapaxes(f_high.data.reshape(n, c, hh * wh), 1, 2))
        high = permute_along(f_high, order[:, :, None, None], axis=1)
        f_up = bilinear_resize(high, hl, wl).reshape(n, c, n_low)
        f_flat = f_low.reshape(n, c, n_low)

        attn = softmax_rows(matmul(f_flat, swap_last(f_up)))  # (n, C_l, C_h)
        attended = matmul(attn, f_up)  # (n, C_l, N_l)
        out = self.beta * attended.reshape(n, c, hl, wl) + f_low

        inverse = np.argsort(order, axis=1, kind="stable")
        channel_map = permute_along(attn, inverse[:, None, :], axis=2)
        return out, channel_map


def position_attention(f_high: Tensor, f_low: Tensor, state: PositionAttention) -> tuple[Tensor, Tensor]:
    return state(f_high, f_low)


def channel_attention(f_high: Tensor, f_low: Tensor, state: ChannelAttention) -> tuple[Tensor, Tensor]:
    return state(f_high, f_low)


class CrossLevelAttention(Module):
    """Both attention branches run in parallel on the same (high, low) pair.

    Either branch may be disabled (ablation); a disabled branch passes its
    input through and reports no map.
    """

    def __init__(self, channels: int, rng: np.random.Generator, use_position: bool = True,
                 use_channel: bool = True):
        self.position = PositionAttention(channels, rng) if use_position else None
        self.channel = ChannelAttention() if use_channel else None

    def forward(self, f_high: Tensor, f_low: Tensor) -> tuple[Tensor, Tensor, AttentionMaps]:
        high_out, pos_map = self.position(f_high, f_low) if self.position else (f_high, None)
        low_out, chan_map = self.channel(f_high, f_low) if self.channel else (f_low, None)
        return high_out, low_out, AttentionMaps(pos_map, chan_map)


def cla_forward(f_high: Tensor, f_low: Tensor, pos_state: PositionAttention,
                chan_state: ChannelAttention) -> tuple[Tensor, Tensor, AttentionMaps]:
    high_out, pos_map = pos_state(f_high, f_low)
    low_out, chan_map = chan_state(f_high, f_low)
    return high_out, low_out, AttentionMaps(pos_map, chan_map)
