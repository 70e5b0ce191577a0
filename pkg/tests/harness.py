"""Shared test fixtures that are not oracles: the conditioned tiny model used
by the end-to-end gradient checks."""

import numpy as np

from busnet import precision
from busnet.gradcheck import compare
from busnet.losses import distance_map
from busnet.model import UNetPPLSTM
from busnet.tensor import Tensor
from busnet.unetpp import ModelConfig

TINY = dict(depth=2, base_channels=2, image_size=8, lstm_hidden=4, distance_threshold=2, dropout=0.0)


def tensor_relative_error(analytic, numeric):
    """max |a - n| over the tensor, relative to the tensor's largest numeric entry."""
    return float(np.abs(analytic - numeric).max() / (np.abs(numeric).max() + 1e-12))


def tiny_model_gradients(seed=0, names=None):
    """(names, analytic, numeric) for the full loss of the L=2, base-2, 8x8 model.

    Zero biases would park every relu pre-activation of a zero input
    region exactly on the kink, and default-scale LSTM weights give
    gradients near roundoff, so both are redrawn to well-conditioned values.
    """
    with precision(np.float64):
        model = UNetPPLSTM(ModelConfig(seed=seed, **TINY))
        model.eval()
        rng = np.random.default_rng(seed)
        for name, p in model.named_parameters():
            if "lstm" in name or "proj" in name:
                p.data = rng.uniform(-1, 1, p.shape)
            elif name.endswith("bias"):
                p.data = rng.uniform(-0.1, 0.1, p.shape)
        x = Tensor(rng.normal(0, 2, (1, 1, 8, 8)))
        mask = np.zeros((8, 8), np.uint8)
        mask[2:6, 3:7] = 1
        classes = distance_map(mask, TINY["distance_threshold"]).classes

        def loss():
            return model.loss(model(x), mask[None], classes[None])[0]

        named = [(n, p) for n, p in model.named_parameters() if names is None or names(n)]
        analytic, numeric = compare(loss, [p for _, p in named])
    return [n for n, _ in named], analytic, numeric
