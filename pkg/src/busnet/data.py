"""BUSI-style image/mask discovery, loading, splitting and paired augmentation.

BUSI stores each ultrasound image next to one or more ground-truth masks
named ``<stem>_mask.png``, ``<stem>_mask_1.png``, ... inside per-class
folders ``benign/``, ``malignant/`` and ``normal/``.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import DataError

log = logging.getLogger(__name__)

LABELS = ("normal", "benign", "malignant")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
_MASK_RE = re.compile(r"^(?P<stem>.+)_mask(?:_(?P<k>\d+))?$", re.IGNORECASE)


@dataclass(frozen=True)
class Pair:
    image: Path
    masks: tuple[Path, ...]
    label: str | None


@dataclass
class Sample:
    image: np.ndarray  # 1 x H x W, float32 in [0, 1]
    mask: np.ndarray  # H x W, uint8 in {0, 1}
    label: str | None
    source: str

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[1:] != self.mask.shape:
            raise DataError(
                f"{self.source}: image {self.image.shape} and mask {self.mask.shape} disagree"
            )


def _infer_label(path: Path, root: Path) -> str | None:
    for part in reversed(path.relative_to(root).parts[:-1]):
        if part.lower() in LABELS:
            return part.lower()
    name = path.stem.lower()
    for label in LABELS:
        if name.startswith(label):
            return label
    return None


def discover_pairs(root, rejects: list[str] | None = None) -> list[Pair]:
    """Pair every image under ``root`` with its ``_mask`` files.

    Images without any mask are skipped and their paths appended to
    ``rejects``. The result is sorted by relative path.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    images: dict[tuple[Path, str], Path] = {}
    masks: dict[tuple[Path, str], list[tuple[int, Path]]] = {}
    for path in root.rglob("*"):
        if not path.is_file() or path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        m = _MASK_RE.match(path.stem)
        if m:
            key = (path.parent, m.group("stem"))
            masks.setdefault(key, []).append((int(m.group("k") or 0), path))
        else:
            images[(path.parent, path.stem)] = path
    pairs = []
    for key in sorted(images, key=lambda k: str(images[k].relative_to(root))):
        path = images[key]
        found = sorted(masks.get(key, []))
        if not found:
            log.warning("no mask for %s", path)
            if rejects is not None:
                rejects.append(str(path))
            continue
        pairs.append(Pair(path, tuple(p for _, p in found), _infer_label(path, root)))
    return pairs


def write_rejects(rejects: Sequence[str], path) -> None:
    Path(path).write_text("".join(f"{r}\tno mask found\n" for r in rejects))


def read_gray(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"))
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def resize(arr: np.ndarray, size: tuple[int, int], nearest: bool = False) -> np.ndarray:
    """Resize a 2-D array to (height, width) with PIL."""
    h, w = size
    mode = Image.NEAREST if nearest else Image.BILINEAR
    if arr.dtype == np.uint8:
        return np.asarray(Image.fromarray(arr).resize((w, h), mode))
    return np.asarray(Image.fromarray(arr.astype(np.float32), mode="F").resize((w, h), mode))


def load_sample(pair: Pair, size: int = 128) -> Sample:
    """Image bilinear-resized and scaled to [0, 1]; masks resized nearest-neighbour,
    thresholded at > 127 and OR-ed together."""
    image = resize(read_gray(pair.image), (size, size)).astype(np.float32) / 255.0
    mask = np.zeros((size, size), dtype=bool)
    for mp in pair.masks:
        mask |= resize(read_gray(mp), (size, size), nearest=True) > 127
    return Sample(image[None], mask.astype(np.uint8), pair.label, pair.image.stem)


def synthetic_disk_sample(size: int = 64, radius: float | None = None, seed: int = 0) -> Sample:
    """Bright centered disk on a darker noisy background."""
    radius = size / 4 if radius is None else radius
    yy, xx = np.mgrid[:size, :size]
    c = (size - 1) / 2
    mask = ((yy - c) ** 2 + (xx - c) ** 2 <= radius**2).astype(np.uint8)
    noise = np.random.default_rng(seed).standard_normal((size, size))
    image = np.clip(0.3 + 0.4 * mask + 0.05 * noise, 0, 1).astype(np.float32)
    return Sample(image[None], mask, "benign", f"synthetic_disk_{size}")


# --- splitting ----------------------------------------------------------------------
@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    stratify: bool = True


def _train_count(n: int, fraction: float) -> int:
    # round first so 0.8 * 780 lands on 624, not 624.0000000001 -> 625
    return min(n, math.ceil(round(fraction * n, 9)))


def _key(s) -> str:
    return getattr(s, "source", None) or str(getattr(s, "image", s))


def split(samples: Sequence, spec: SplitSpec = SplitSpec()) -> tuple[list, list]:
    """Seeded shuffle into train/test; ceil(fraction * n) go to train (per label
    when stratifying). Independent of the input order."""
    ordered = sorted(samples, key=_key)
    if spec.stratify:
        groups: dict[str, list] = {}
        for s in ordered:
            groups.setdefault(str(getattr(s, "label", None)), []).append(s)
        parts = [groups[k] for k in sorted(groups)]
    else:
        parts = [ordered]
    train, test = [], []
    for g, part in enumerate(parts):
        rng = np.random.default_rng([spec.seed, g])
        shuffled = [part[i] for i in rng.permutation(len(part))]
        k = _train_count(len(part), spec.train_fraction)
        train += shuffled[:k]
        test += shuffled[k:]
    return train, test


# --- augmentation -------------------------------------------------------------------
@dataclass(frozen=True)
class AugmentationPolicy:
    hflip: float = 0.5
    vflip: float = 0.5
    max_rotation: float = 15.0  # degrees
    seed: int = 0


IDENTITY_POLICY = AugmentationPolicy(hflip=0.0, vflip=0.0, max_rotation=0.0)


def augment(sample: Sample, policy: AugmentationPolicy, epoch: int, index: int) -> Sample:
    """Apply one random flip/rotation draw to image and mask alike.

    The draw depends only on (policy.seed, epoch, index); pixels rotated in
    from outside the frame are 0.
    """
    rng = np.random.default_rng([policy.seed, epoch, index])
    do_h = rng.random() < policy.hflip
    do_v = rng.random() < policy.vflip
    angle = rng.uniform(-policy.max_rotation, policy.max_rotation)
    image, mask = sample.image[0], sample.mask
    if do_h:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if do_v:
        image, mask = image[::-1], mask[::-1]
    if angle != 0.0:
        image = ndimage.rotate(image, angle, reshape=False, order=1, mode="constant", cval=0.0)
        mask = ndimage.rotate(mask, angle, reshape=False, order=0, mode="constant", cval=0)
        image = np.clip(image, 0.0, 1.0)
    return replace(
        sample,
        image=np.ascontiguousarray(image, dtype=np.float32)[None],
        mask=np.ascontiguousarray(mask, dtype=np.uint8),
    )


def load_all(pairs: Iterable[Pair], size: int = 128) -> list[Sample]:
    return [load_sample(p, size) for p in pairs]
