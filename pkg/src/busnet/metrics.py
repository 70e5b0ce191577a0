"""Pixel confusion counts and the seven overlap/classification metrics.

Metric values are exact :class:`fractions.Fraction` objects; a zero
denominator makes a metric undefined (``None``), never 0, 1 or NaN.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, UsageError

# Column order of the results table: accuracy, specificity, precision,
# sensitivity, F1, Jaccard, Dice.
METRIC_NAMES = ("accuracy", "specificity", "precision", "sensitivity", "f1", "jaccard", "dice")
COLUMN_TITLES = ("Accuracy", "Specificity", "PRE", "Sensitivity", "F1-score", "Jaccard", "Dice")
UNDEFINED = "—"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise DataError(f"negative confusion count in {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


@dataclass(frozen=True)
class MetricsReport:
    accuracy: Fraction | None
    specificity: Fraction | None
    precision: Fraction | None
    sensitivity: Fraction | None
    f1: Fraction | None
    jaccard: Fraction | None
    dice: Fraction | None

    def values(self) -> list[Fraction | None]:
        return [getattr(self, f.name) for f in fields(self)]

    def as_floats(self) -> dict[str, float | None]:
        return {n: (None if v is None else float(v)) for n, v in zip(METRIC_NAMES, self.values())}

    def table_row(self) -> str:
        """Percentages with two decimals, separated as in the results table."""
        return " / ".join(UNDEFINED if v is None else f"{100 * float(v):.2f}" for v in self.values())

    def records(self, prefix: str = "") -> list[str]:
        """One machine-readable ``name=value`` line per metric."""
        out = []
        for name, v in zip(METRIC_NAMES, self.values()):
            out.append(f"{prefix}{name}={'undefined' if v is None else repr(float(v))}")
        return out


def _is_binary(a: np.ndarray) -> bool:
    return bool(np.all((a == 0) | (a == 1)))


def confusion(pred, gt) -> ConfusionCounts:
    """Pixelwise counts with foreground as the positive class."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if not (_is_binary(pred) and _is_binary(gt)):
        raise DataError("confusion expects binary masks")
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: int, den: int) -> Fraction | None:
    return None if den == 0 else Fraction(num, den)


def report(counts: ConfusionCounts) -> MetricsReport:
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    if counts.total == 0:
        raise UsageError("cannot report metrics on zero pixels")
    precision = _ratio(tp, tp + fp)
    sensitivity = _ratio(tp, tp + fn)
    if precision is None or sensitivity is None or precision + sensitivity == 0:
        f1 = None
    else:
        f1 = 2 * precision * sensitivity / (precision + sensitivity)
    return MetricsReport(
        accuracy=_ratio(tp + tn, counts.total),
        specificity=_ratio(tn, tn + fp),
        precision=precision,
        sensitivity=sensitivity,
        f1=f1,
        jaccard=_ratio(tp, tp + fp + fn),
        dice=_ratio(2 * tp, 2 * tp + fp + fn),
    )


def aggregate(per_sample: Sequence[ConfusionCounts]) -> MetricsReport:
    """Micro average: pool the counts, then compute every metric once."""
    if not per_sample:
        raise UsageError("aggregate needs at least one sample")
    pooled = per_sample[0]
    for c in per_sample[1:]:
        pooled = pooled + c
    return report(pooled)


def aggregate_macro(per_sample: Sequence[ConfusionCounts]) -> MetricsReport:
    """Mean of per-sample metrics; undefined values are left out of each mean."""
    if not per_sample:
        raise UsageError("aggregate needs at least one sample")
    reports = [report(c) for c in per_sample]
    means = []
    for name in METRIC_NAMES:
        defined = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        means.append(sum(defined, Fraction(0)) / len(defined) if defined else None)
    return MetricsReport(*means)


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """p > threshold -> 1; a tie goes to background."""
    return (np.asarray(prob) > threshold).astype(np.uint8)


def format_table(rows: Iterable[tuple[str, MetricsReport]]) -> str:
    rows = list(rows)
    width = max([len("Model")] + [len(name) for name, _ in rows])
    head = f"{'Model':<{width}}  " + "  ".join(f"{t:>11}" for t in COLUMN_TITLES)
    lines = [head]
    for name, r in rows:
        cells = [UNDEFINED if v is None else f"{100 * float(v):.2f}" for v in r.values()]
        lines.append(f"{name:<{width}}  " + "  ".join(f"{c:>11}" for c in cells))
    return "\n".join(lines)

