"""Nested UNet++ backbone.

Node X^{i,j} sits at resolution level i (i halvings of the input) and
position j along that level's skip path:

    x^{i,0} = conv(pool(x^{i-1,0}))                      (x^{0,0} = conv(input))
    x^{i,j} = conv(cat(x^{i,0}, ..., x^{i,j-1}, up(x^{i+1,j-1})))   j > 0

``up`` is bilinear 2x interpolation followed by a 1x1 convolution that brings
the lower level's channels down to this level's width.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .layers import ConvBlock, Module
from .tensor import ConvSpec, Tensor


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 5
    base_channels: int = 16
    input_channels: int = 1
    image_size: int = 128
    lstm_hidden: int = 16
    lstm_layers: int = 2
    spatial_kernel: int = 7
    distance_threshold: int = 5
    dropout: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1 or self.input_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.image_size < 1 or self.image_size % 2 ** (self.depth - 1):
            raise ConfigError(
                f"image_size {self.image_size} not divisible by 2^{self.depth - 1}"
            )
        if self.lstm_hidden < 1 or self.lstm_layers < 1:
            raise ConfigError("LSTM sizes must be positive")
        if self.spatial_kernel < 1 or self.spatial_kernel % 2 == 0:
            raise ConfigError("spatial_kernel must be a positive odd integer")
        if self.distance_threshold < 1:
            raise ConfigError("distance_threshold must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def num_classes(self) -> int:
        return 2 * self.distance_threshold + 1

    @property
    def fused_channels(self) -> int:
        return (self.depth - 1) * self.base_channels

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def hash(self) -> bytes:
        """SHA-256 of every field that affects the parameter layout or forward pass."""
        fields = asdict(self)
        fields.pop("seed")
        return hashlib.sha256(json.dumps(fields, sort_keys=True).encode()).digest()


class NodeId(NamedTuple):
    i: int
    j: int


def node_order(depth: int) -> list[NodeId]:
    """Dependency order: tiers of increasing i + j, deeper nodes first within a tier."""
    order = []
    for tier in range(depth):
        for i in range(tier, -1, -1):
            order.append(NodeId(i, tier - i))
    return order


@dataclass
class BackboneOutput:
    maps: list[Tensor]
    nodes: dict[NodeId, Tensor] = field(default_factory=dict)


class Node(Module):
    """Two stacked 3x3 same-padding ConvBlocks."""

    def __init__(self, c_in: int, c_out: int, rng, dropout: float):
        self.conv1 = ConvBlock(
            ConvSpec(c_in, c_out, 3, 1, 1), rng, "relu", dropout, int(rng.integers(2**31))
        )
        self.conv2 = ConvBlock(
            ConvSpec(c_out, c_out, 3, 1, 1), rng, "relu", dropout, int(rng.integers(2**31))
        )

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv2(self.conv1(x))


class UNetPlusPlus(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.nodes: dict[str, Node] = {}
        self.up: dict[str, ConvBlock] = {}
        for i, j in node_order(config.depth):
            c = config.channels(i)
            key = f"{i}_{j}"
            if j == 0:
                c_in = config.input_channels if i == 0 else config.channels(i - 1)
            else:
                self.up[key] = ConvBlock(
                    ConvSpec(config.channels(i + 1), c, 1), rng, activation=None
                )
                c_in = (j + 1) * c
            self.nodes[key] = Node(c_in, c, rng, config.dropout)

    def input_channels(self, node: NodeId) -> int:
        return self.nodes[f"{node.i}_{node.j}"].conv1.spec.in_channels

    def predecessors(self, node: NodeId) -> list[NodeId]:
        i, j = node
        if j == 0:
            return [NodeId(i - 1, 0)] if i > 0 else []
        return [NodeId(i, k) for k in range(j)] + [NodeId(i + 1, j - 1)]

    def __call__(self, x: Tensor) -> BackboneOutput:
        return self.forward(x)

    def forward(self, x: Tensor) -> BackboneOutput:
        cfg = self.config
        expected = (cfg.input_channels, cfg.image_size, cfg.image_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise DimensionError(f"backbone expects N x {expected}, got {x.shape}")
        out: dict[NodeId, Tensor] = {}
        for node in node_order(cfg.depth):
            i, j = node
            key = f"{i}_{j}"
            if j == 0:
                inp = x if i == 0 else T.max_pool2d(out[NodeId(i - 1, 0)], 2, 2)
            else:
                lower = self.up[key](T.upsample2x(out[NodeId(i + 1, j - 1)]))
                inp = T.concat_channels([out[NodeId(i, k)] for k in range(j)] + [lower])
            out[node] = self.nodes[key](inp)
        maps = [out[NodeId(0, j)] for j in range(1, cfg.depth)]
        return BackboneOutput(maps=maps, nodes=out)


def build_graph(config: ModelConfig, rng: np.random.Generator | None = None) -> UNetPlusPlus:
    """Instantiate the L(L+1)/2 nodes of a depth-L nest."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    return UNetPlusPlus(config, rng)
