"""Channel/spatial attention over the fused top-row backbone maps, and the two
prediction heads.

Channel attention summarizes each channel by its spatial mean and maximum,
reads each summary as a length-C sequence of scalars (channels in index
order) through a stack of LSTM layers, projects every position's hidden
state to one score, sums the two branches and squashes with a sigmoid.
Both branches share the LSTM and projection weights.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionError, UsageError
from .layers import ConvBlock, LSTMCellParams, Module, lstm_sequence, parameter
from .tensor import ConvSpec, Tensor
from .unetpp import BackboneOutput


def _batched(F: Tensor) -> tuple[Tensor, bool]:
    if F.ndim == 3:
        return F.reshape(1, *F.shape), True
    if F.ndim != 4:
        raise DimensionError(f"expected C x H x W or N x C x H x W, got {F.shape}")
    return F, False


def channel_descriptors(F: Tensor) -> tuple[Tensor, Tensor]:
    """Per-channel spatial mean and maximum, each shaped N x C x 1 x 1."""
    F, single = _batched(F)
    n, c, h, w = F.shape
    avg = F.mean(axis=(2, 3), keepdims=True)
    mx = F.reshape(n, c, h * w).max(axis=2).reshape(n, c, 1, 1)
    if single:
        return avg.reshape(c, 1, 1), mx.reshape(c, 1, 1)
    return avg, mx


class ChannelAttention(Module):
    def __init__(self, channels: int, hidden: int, rng: np.random.Generator, layers: int = 2):
        self.channels = channels
        self.hidden = hidden
        self.lstm = [LSTMCellParams(1 if k == 0 else hidden, hidden, rng) for k in range(layers)]
        bound = 1.0 / np.sqrt(hidden)
        # row c projects the hidden state at sequence position c
        self.proj_weight = parameter(rng.uniform(-bound, bound, size=(channels, hidden)))
        self.proj_bias = parameter(np.zeros(channels))

    def branch_scores(self, descriptor: Tensor) -> Tensor:
        """Run (B, C) descriptors through the LSTM stack and projection -> (B, C)."""
        xs = [descriptor[:, t : t + 1] for t in range(self.channels)]
        for layer in self.lstm:
            xs = lstm_sequence(layer, xs)
        hidden = T.stack(xs, axis=1)
        return (hidden * self.proj_weight).sum(axis=2) + self.proj_bias

    def __call__(self, F: Tensor) -> Tensor:
        return channel_attention(self, F)


def channel_attention(params: ChannelAttention, F: Tensor) -> Tensor:
    """M_c = sigmoid(proj(lstm(avg)) + proj(lstm(max))), shaped like the descriptors."""
    F4, single = _batched(F)
    n, c = F4.shape[:2]
    if c != params.channels:
        raise DimensionError(f"channel attention built for C={params.channels}, got C={c}")
    avg, mx = channel_descriptors(F4)
    both = T.concat([avg.reshape(n, c), mx.reshape(n, c)], axis=0)
    scores = params.branch_scores(both)
    m_c = T.sigmoid(scores[:n] + scores[n:])
    return m_c.reshape(c, 1, 1) if single else m_c.reshape(n, c, 1, 1)


class SpatialAttention(Module):
    def __init__(self, rng: np.random.Generator, kernel: int = 7):
        self.conv = ConvBlock(ConvSpec(2, 1, kernel, 1, kernel // 2), rng, activation="sigmoid")

    def __call__(self, F: Tensor) -> Tensor:
        return spatial_attention(self, F)


def spatial_attention(params: SpatialAttention, F: Tensor) -> Tensor:
    """M_s = sigmoid(conv7x7(cat(mean_c F, max_c F))), shaped (N x) 1 x H x W."""
    F4, single = _batched(F)
    pooled = T.concat([F4.mean(axis=1, keepdims=True), F4.max(axis=1, keepdims=True)], axis=1)
    m_s = params.conv(pooled)
    return m_s.reshape(*m_s.shape[1:]) if single else m_s


class CBAM(Module):
    def __init__(self, channels: int, hidden: int, rng: np.random.Generator,
                 layers: int = 2, kernel: int = 7):
        self.channel = ChannelAttention(channels, hidden, rng, layers)
        self.spatial = SpatialAttention(rng, kernel)

    def __call__(self, F: Tensor) -> Tensor:
        return cbam_apply(self, F)


def cbam_apply(params: CBAM, F: Tensor, return_maps: bool = False):
    """F' = M_c(F) * F, then F'' = M_s(F') * F'."""
    m_c = channel_attention(params.channel, F)
    refined = m_c * F
    m_s = spatial_attention(params.spatial, refined)
    out = m_s * refined
    if return_maps:
        return out, m_c, m_s
    return out


class FusionHeads(Module):
    """CBAM over the concatenated top-row maps, then two 1x1 heads reading F''."""

    def __init__(self, arity: int, channels: int, num_classes: int, hidden: int,
                 rng: np.random.Generator, lstm_layers: int = 2, kernel: int = 7):
        self.arity = arity
        self.cbam = CBAM(channels, hidden, rng, lstm_layers, kernel)
        self.seg_head = ConvBlock(ConvSpec(channels, 1, 1), rng, activation=None)
        self.dc_head = ConvBlock(ConvSpec(channels, num_classes, 1), rng, activation=None)


def fuse(outputs: BackboneOutput, heads: FusionHeads) -> tuple[Tensor, Tensor]:
    """Returns (segmentation logits N x 1 x H x W, distance-class logits N x K x H x W)."""
    if len(outputs.maps) != heads.arity:
        raise UsageError(f"fuse expects {heads.arity} top-row maps, got {len(outputs.maps)}")
    fused = cbam_apply(heads.cbam, T.concat_channels(outputs.maps))
    return heads.seg_head(fused), heads.dc_head(fused)
