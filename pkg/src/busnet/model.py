"""The full network: UNet++ backbone, attention fusion, heads and loss parameters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import FusionHeads, fuse
from .layers import Module
from .losses import LossParams, dc_loss, seg_loss, total_loss
from .tensor import Tensor
from .unetpp import BackboneOutput, ModelConfig, build_graph


@dataclass
class Prediction:
    seg_logits: Tensor
    dc_logits: Tensor
    backbone: BackboneOutput


class UNetPPLSTM(Module):
    def __init__(self, config: ModelConfig, loss_init: dict | None = None):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.backbone = build_graph(config, rng)
        self.fusion = FusionHeads(
            arity=config.depth - 1,
            channels=config.fused_channels,
            num_classes=config.num_classes,
            hidden=config.lstm_hidden,
            rng=rng,
            lstm_layers=config.lstm_layers,
            kernel=config.spatial_kernel,
        )
        self.loss_params = LossParams(**(loss_init or {}))

    def __call__(self, x: Tensor) -> Prediction:
        out = self.backbone(x)
        seg, dc = fuse(out, self.fusion)
        return Prediction(seg, dc, out)

    def loss(self, pred: Prediction, masks: np.ndarray, classes: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (total, segmentation term, distance-class term)."""
        lp = self.loss_params
        seg = seg_loss(pred.seg_logits, masks, lp.sigma_seg)
        dc = dc_loss(pred.dc_logits, classes, lp.sigma_dc)
        return total_loss(seg, dc, lp), seg, dc

    def probabilities(self, seg_logits: Tensor) -> np.ndarray:
        """Foreground probability sigmoid(logit / sigma_seg^2) as a plain array."""
        sigma = float(np.exp(self.loss_params.raw_sigma_seg.data))
        return T.sigmoid(seg_logits.detach() * (1.0 / sigma**2)).data
