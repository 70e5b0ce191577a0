"""Signed truncated distance targets and the two-task objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError
from .layers import Module, parameter
from .tensor import Tensor


@dataclass(frozen=True)
class DistanceMapConfig:
    threshold: int = 5

    def __post_init__(self) -> None:
        if self.threshold < 1:
            raise ConfigError(f"distance threshold must be >= 1, got {self.threshold}")

    @property
    def num_classes(self) -> int:
        return 2 * self.threshold + 1


@dataclass
class DistanceClassMap:
    real: np.ndarray
    classes: np.ndarray
    threshold: int

    @property
    def num_classes(self) -> int:
        return 2 * self.threshold + 1

    def one_hot(self, dtype=np.float32) -> np.ndarray:
        """K x H x W indicator targets."""
        return (np.arange(self.num_classes)[:, None, None] == self.classes).astype(dtype)


def check_binary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    bad = mask[(mask != 0) & (mask != 1)]
    if bad.size:
        raise DataError(f"mask is not binary: found value {bad.flat[0]!r}")
    return mask.astype(bool)


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 8-adjacent background pixel.

    Pixels outside the image do not count as background.
    """
    mask = check_binary(mask)
    interior = ndimage.binary_erosion(
        mask, structure=np.ones((3, 3), bool), border_value=1
    )
    return mask & ~interior


def distance_map(mask: np.ndarray, config: DistanceMapConfig | int = DistanceMapConfig()) -> DistanceClassMap:
    """Dist(i) = sign(i) * min(distance to nearest boundary pixel, d).

    sign is +1 inside the mask (boundary pixels included) and -1 outside.
    Classes are round(Dist) + d, in [0, 2d].
    """
    if isinstance(config, int):
        config = DistanceMapConfig(config)
    mask = check_binary(mask)
    if mask.ndim != 2:
        raise DimensionError(f"mask must be H x W, got {mask.shape}")
    d = config.threshold
    boundary = boundary_pixels(mask)
    if boundary.any():
        dist = np.minimum(ndimage.distance_transform_edt(~boundary), float(d))
    else:
        dist = np.full(mask.shape, float(d))
    real = np.where(mask, dist, -dist)
    classes = (np.rint(real).astype(np.int64) + d).astype(np.int64)
    return DistanceClassMap(real=real, classes=classes, threshold=d)


def export_class_image(dmap: DistanceClassMap) -> np.ndarray:
    """16-bit visualization: class index * 255 / (K - 1), rounded."""
    scale = 255.0 / (dmap.num_classes - 1)
    return np.rint(dmap.classes * scale).astype(np.uint16)


# --- probabilistic pieces -------------------------------------------------
def _inverse_square(sigma) -> Tensor | float:
    if isinstance(sigma, Tensor):
        if np.any(sigma.data <= 0):
            raise ConfigError("temperature must be positive")
        return 1.0 / (sigma * sigma)
    if sigma <= 0:
        raise ConfigError(f"temperature must be positive, got {sigma}")
    return 1.0 / (float(sigma) ** 2)


def tempered_softmax(logits, sigma_t, axis: int = -1) -> Tensor:
    """p_c = exp(f_c / s^2) / sum_c' exp(f_c' / s^2)."""
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    z = logits * _inverse_square(sigma_t)
    # normalizing the exponentials directly keeps equal logits at exactly 1/K
    e = T.exp(z - z.detach().data.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _class_targets(targets, shape) -> np.ndarray:
    if isinstance(targets, DistanceClassMap):
        classes = targets.classes
    elif isinstance(targets, (list, tuple)) and targets and isinstance(targets[0], DistanceClassMap):
        classes = np.stack([t.classes for t in targets])
    else:
        classes = np.asarray(targets)
    if classes.ndim == 2:
        classes = classes[None]
    return classes


def dc_loss(dc_logits: Tensor, targets, sigma_dc=1.0) -> Tensor:
    """Mean over pixels of -sum_c C_c log p_c with tempered-softmax probabilities.

    ``dc_logits`` is N x K x H x W (or K x H x W); ``targets`` holds class
    indices N x H x W / H x W or DistanceClassMap objects.
    """
    if dc_logits.ndim == 3:
        dc_logits = dc_logits.reshape(1, *dc_logits.shape)
    n, k, h, w = dc_logits.shape
    classes = _class_targets(targets, dc_logits.shape)
    if classes.shape != (n, h, w):
        raise DimensionError(f"targets {classes.shape} do not match logits {dc_logits.shape}")
    if classes.min() < 0 or classes.max() >= k:
        raise DataError(f"distance class out of range [0, {k - 1}]")
    one_hot = np.arange(k)[None, :, None, None] == classes[:, None]
    logp = T.log_softmax(dc_logits * _inverse_square(sigma_dc), axis=1)
    return -(logp * Tensor._wrap(one_hot.astype(dc_logits.dtype))).sum() / (n * h * w)


def _mask_tensor(mask, like: Tensor) -> Tensor:
    mask = np.asarray(mask, dtype=like.dtype)
    if mask.shape != like.shape:
        mask = mask.reshape(like.shape)
    return Tensor._wrap(mask)


def bce_with_logits(z: Tensor, mask) -> Tensor:
    """Mean binary cross-entropy of sigmoid(z) against a 0/1 mask."""
    g = _mask_tensor(mask, z)
    return (T.softplus(z) - g * z).mean()


def soft_dice_loss(p: Tensor, mask, eps: float = 1e-6) -> Tensor:
    g = _mask_tensor(mask, p)
    return 1.0 - 2.0 * (p * g).sum() / (p.sum() + float(g.data.sum()) + eps)


def seg_loss(seg_logits: Tensor, mask, sigma_seg=1.0, eps: float = 1e-6) -> Tensor:
    """BCE + soft Dice on sigmoid(logit / sigma^2), pooled over every pixel."""
    z = seg_logits * _inverse_square(sigma_seg)
    return bce_with_logits(z, mask) + soft_dice_loss(T.sigmoid(z), mask, eps)


_SOFTPLUS_ONE = math.log(math.e - 1.0)


class LossParams(Module):
    """Learnable task weights (softplus of raw values) and temperatures (exp of raw)."""

    def __init__(self, lambda_seg: float = 1.0, lambda_dc: float = 1.0,
                 sigma_seg: float = 1.0, sigma_dc: float = 1.0):
        for v in (lambda_seg, lambda_dc, sigma_seg, sigma_dc):
            if v <= 0:
                raise ConfigError("loss weights and temperatures must start positive")
        self.raw_lambda_seg = parameter(np.log(np.expm1(lambda_seg)))
        self.raw_lambda_dc = parameter(np.log(np.expm1(lambda_dc)))
        self.raw_sigma_seg = parameter(np.log(sigma_seg))
        self.raw_sigma_dc = parameter(np.log(sigma_dc))

    @property
    def lambda_seg(self) -> Tensor:
        return T.softplus(self.raw_lambda_seg)

    @property
    def lambda_dc(self) -> Tensor:
        return T.softplus(self.raw_lambda_dc)

    @property
    def sigma_seg(self) -> Tensor:
        return T.exp(self.raw_sigma_seg)

    @property
    def sigma_dc(self) -> Tensor:
        return T.exp(self.raw_sigma_dc)


def total_loss(seg: Tensor, dc: Tensor, params: LossParams) -> Tensor:
    """lambda_seg * seg + lambda_dc * dc."""
    return params.lambda_seg * seg + params.lambda_dc * dc
