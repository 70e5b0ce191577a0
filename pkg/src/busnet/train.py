"""Training loop, evaluation, prediction and distance-map export."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .checkpoint import Checkpoint, save_model
from .data import (
    AugmentationPolicy,
    Sample,
    SplitSpec,
    augment,
    discover_pairs,
    load_all,
    load_sample,
    read_gray,
    resize,
    split,
    write_rejects,
)
from .errors import ConfigError, DataError, NumericalError
from .losses import distance_map, export_class_image
from .metrics import ConfusionCounts, MetricsReport, aggregate, aggregate_macro, binarize, confusion
from .model import UNetPPLSTM
from .optim import Adam
from .tensor import Tape, Tensor
from .unetpp import ModelConfig

log = logging.getLogger(__name__)

DATASET_ENV = "BUSI_ROOT"
CURVE_COLUMNS = ("epoch", "split", "loss", "accuracy", "recall", "precision")


@dataclass
class RunConfig:
    data_root: str | None = None
    out_dir: str = "runs/default"
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    image_size: int = 128
    lr: float = 0.001
    dropout: float = 0.5
    lstm_hidden: int = 16
    depth: int = 5
    base_channels: int = 16
    distance_threshold: int = 5
    lambda_seg: float = 1.0
    lambda_dc: float = 1.0
    sigma_seg: float = 1.0
    sigma_dc: float = 1.0
    train_fraction: float = 0.8
    stratify: bool = True
    augment: bool = True
    checkpoint_every: int = 0
    max_steps: int | None = None
    threshold: float = 0.5
    overfit: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            depth=self.depth,
            base_channels=self.base_channels,
            image_size=self.image_size,
            lstm_hidden=self.lstm_hidden,
            distance_threshold=self.distance_threshold,
            dropout=0.0 if self.overfit else self.dropout,
            seed=self.seed,
        )

    def loss_init(self) -> dict:
        return dict(lambda_seg=self.lambda_seg, lambda_dc=self.lambda_dc,
                    sigma_seg=self.sigma_seg, sigma_dc=self.sigma_dc)


@dataclass
class Evaluation:
    micro: MetricsReport
    macro: MetricsReport
    counts: list[ConfusionCounts]
    loss: float


@dataclass
class TrainResult:
    model: UNetPPLSTM
    checkpoint: Checkpoint
    checkpoint_path: Path
    curves_path: Path
    steps: int
    history: list[dict] = field(default_factory=list)


def _stack(samples: Sequence[Sample], threshold: int):
    images = np.stack([s.image for s in samples]).astype(np.float32)
    masks = np.stack([s.mask for s in samples])
    classes = np.stack([distance_map(s.mask, threshold).classes for s in samples])
    return images, masks, classes


def load_dataset(config: RunConfig) -> tuple[list[Sample], list[Sample]]:
    root = config.data_root or os.environ.get(DATASET_ENV)
    if not root:
        raise DataError(f"no dataset root given (flag or ${DATASET_ENV})")
    rejects: list[str] = []
    pairs = discover_pairs(root, rejects)
    if rejects:
        Path(config.out_dir).mkdir(parents=True, exist_ok=True)
        write_rejects(rejects, Path(config.out_dir) / "rejects.txt")
    samples = load_all(pairs, config.image_size)
    return split(samples, SplitSpec(config.train_fraction, config.seed, config.stratify))


def evaluate(model: UNetPPLSTM, samples: Sequence[Sample], threshold: float = 0.5,
             batch_size: int = 16) -> Evaluation:
    """Eval-mode forward (dropout off), threshold the foreground probability,
    and score every sample."""
    if not samples:
        raise DataError("cannot evaluate an empty split")
    was_training = model.training
    model.eval()
    counts, total_loss = [], 0.0
    d = model.config.distance_threshold
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images, masks, classes = _stack(chunk, d)
        pred = model(Tensor(images))
        loss, _, _ = model.loss(pred, masks, classes)
        total_loss += loss.item() * len(chunk)
        probs = model.probabilities(pred.seg_logits)[:, 0]
        for p, m in zip(probs, masks):
            counts.append(confusion(binarize(p, threshold), m))
    model.train(was_training)
    return Evaluation(aggregate(counts), aggregate_macro(counts), counts, total_loss / len(samples))


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def train(config: RunConfig, train_samples: Sequence[Sample] | None = None,
          test_samples: Sequence[Sample] | None = None) -> TrainResult:
    """Adam on the weighted two-task loss, one curves row per split per epoch."""
    if train_samples is None:
        train_samples, loaded_test = load_dataset(config)
        if test_samples is None:
            test_samples = loaded_test
    train_samples = list(train_samples)
    test_samples = list(test_samples or [])
    if not train_samples:
        raise DataError("training set is empty")
    for s in train_samples + test_samples:
        if s.image.shape[1:] != (config.image_size, config.image_size):
            raise DataError(f"{s.source}: sample extent {s.image.shape[1:]} != image_size {config.image_size}")

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = UNetPPLSTM(config.model_config(), config.loss_init())
    model.train()
    opt = Adam(model.named_parameters(), lr=config.lr)
    policy = AugmentationPolicy(seed=config.seed)
    use_aug = config.augment and not config.overfit
    d = model.config.distance_threshold

    curves_path = out_dir / "curves.csv"
    history: list[dict] = []
    with open(curves_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_COLUMNS)
        step = 0
        for epoch in range(config.epochs):
            if config.max_steps is not None and step >= config.max_steps:
                break
            order = np.random.default_rng([config.seed, epoch]).permutation(len(train_samples))
            for start in range(0, len(order), config.batch_size):
                if config.max_steps is not None and step >= config.max_steps:
                    break
                idx = order[start : start + config.batch_size]
                batch = [
                    augment(train_samples[k], policy, epoch, int(k)) if use_aug else train_samples[k]
                    for k in idx
                ]
                images, masks, classes = _stack(batch, d)
                with Tape() as tape:
                    pred = model(Tensor(images))
                    loss, seg, dc = model.loss(pred, masks, classes)
                if not np.isfinite(loss.item()):
                    raise NumericalError(
                        f"non-finite loss at step {step} (epoch {epoch}): "
                        f"seg={seg.item()} dc={dc.item()}"
                    )
                opt.zero_grad()
                tape.backward(loss)
                opt.step()
                step += 1
                log.debug("step %d loss %.6f", step, loss.item())

            for split_name, samples in (("train", train_samples), ("test", test_samples)):
                if not samples:
                    continue
                ev = evaluate(model, samples, config.threshold, config.batch_size)
                row = {
                    "epoch": epoch + 1,
                    "split": split_name,
                    "loss": ev.loss,
                    "accuracy": ev.micro.accuracy,
                    "recall": ev.micro.sensitivity,
                    "precision": ev.micro.precision,
                    "report": ev.micro,
                }
                history.append(row)
                writer.writerow([epoch + 1, split_name, repr(ev.loss), _fmt(row["accuracy"]),
                                 _fmt(row["recall"]), _fmt(row["precision"])])
                fh.flush()
                log.info("epoch %d %s loss %.4f dice %s", epoch + 1, split_name, ev.loss,
                         ev.micro.table_row())
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_model(model, out_dir / f"epoch_{epoch + 1:04d}.busn", step)

    final_path = out_dir / "final.busn"
    ckpt = save_model(model, final_path, step)
    return TrainResult(model, ckpt, final_path, curves_path, step, history)


def predict(model: UNetPPLSTM, image_path, out_path, prob_path=None,
            threshold: float = 0.5) -> np.ndarray:
    """Segment one image file; the mask is written at the image's original extent."""
    original = read_gray(image_path)
    size = model.config.image_size
    image = resize(original, (size, size)).astype(np.float32) / 255.0
    model.eval()
    pred = model(Tensor(image[None, None]))
    prob = model.probabilities(pred.seg_logits)[0, 0]
    mask = binarize(prob, threshold) * np.uint8(255)
    mask = resize(mask, original.shape, nearest=True)
    Image.fromarray(mask).save(out_path)
    if prob_path is not None:
        full = np.clip(resize(prob, original.shape), 0.0, 1.0)
        Image.fromarray(np.rint(full * 255).astype(np.uint8)).save(prob_path)
    return mask


def make_distance_maps(root, out_dir, d: int = 5, size: int = 128) -> Path:
    """Export one 16-bit class image per discovered sample plus ``manifest.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rejects: list[str] = []
    pairs = discover_pairs(root, rejects)
    if rejects:
        write_rejects(rejects, out_dir / "rejects.txt")
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source", "label", "image", "distance_map", "num_classes"])
        for pair in pairs:
            sample = load_sample(pair, size)
            dmap = distance_map(sample.mask, d)
            target = out_dir / f"{pair.image.stem}_dist.png"
            Image.fromarray(export_class_image(dmap)).save(target)
            writer.writerow([sample.source, sample.label or "", str(pair.image), target.name,
                             dmap.num_classes])
    return manifest


def overfit_config(**overrides) -> RunConfig:
    """Single-sample memorization settings: 64 x 64, base 8, d = 3, batch 1."""
    base = RunConfig(image_size=64, base_channels=8, distance_threshold=3, batch_size=1,
                     epochs=200, lr=1e-3, overfit=True, augment=False)
    return replace(base, **overrides)
