"""Segmentation quality and embedding-structure measurements."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np
import numpy.typing as npt

from .const import IGNORE_LABEL
from .core import LabelMap, Rng, Tensor, label_array
from .exceptions import ShapeMismatch


class ConfusionMatrix:
    """Pixel counts with ground truth on rows and prediction on columns."""

    def __init__(self, num_classes: int) -> None:
        """Initialize an all-zero matrix."""
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        """Return the number of counted pixels."""
        return int(self.counts.sum())

    def update(
        self, truth: LabelMap | npt.ArrayLike, prediction: npt.ArrayLike
    ) -> ConfusionMatrix:
        """Count every non-IGNORE pixel of a label/prediction pair."""
        gt = label_array(truth).astype(np.int64)
        pred = np.asarray(prediction).astype(np.int64)
        if gt.shape != pred.shape:
            raise ShapeMismatch(f"Labels {gt.shape} do not match predictions {pred.shape}")
        keep = gt != IGNORE_LABEL
        index = self.num_classes * gt[keep] + pred[keep]
        self.counts += np.bincount(index, minlength=self.num_classes**2).reshape(
            self.num_classes, self.num_classes
        )
        return self

    def merge(self, other: ConfusionMatrix) -> ConfusionMatrix:
        """Add another matrix's counts into this one."""
        self.counts += other.counts
        return self

    def iou(self) -> Tensor:
        """Per-class IoU, NaN where the class never appears in truth or prediction."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / union, np.nan)


def miou(cm: ConfusionMatrix) -> tuple[float, Tensor]:
    """Mean IoU over classes with a nonzero union, plus the per-class vector."""
    per_class = cm.iou()
    included = per_class[~np.isnan(per_class)]
    score = float(np.mean(included)) if included.size else float("nan")
    return score, per_class


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    """Fraction of counted pixels predicted correctly."""
    return float(np.trace(cm.counts) / cm.total) if cm.total else float("nan")


def mean_class_accuracy(cm: ConfusionMatrix) -> float:
    """Recall averaged over classes present in the ground truth."""
    support = cm.counts.sum(axis=1)
    present = support > 0
    if not present.any():
        return float("nan")
    return float(np.mean(np.diag(cm.counts)[present] / support[present]))


@dataclass
class EmbeddingStructure:
    """Mean cosine similarity within and across classes."""

    intra: float
    inter: float
    per_class_intra: dict[int, float] = field(default_factory=dict)
    per_class_inter: dict[int, float] = field(default_factory=dict)


def _pair_mean(
    left: Tensor, right: Tensor | None, max_pairs: int | None, rng: Rng
) -> tuple[float, int]:
    """Mean dot product over pairs and the number of pairs it stands for.

    right=None means unordered distinct pairs within left.
    """
    if right is None:
        count = left.shape[0] * (left.shape[0] - 1) // 2
        if count == 0:
            return float("nan"), 0
        if max_pairs is None or count <= max_pairs:
            gram = left @ left.T
            return float(gram[np.triu_indices(left.shape[0], k=1)].mean()), count
        first = rng.integers(0, left.shape[0], max_pairs)
        second = rng.integers(0, left.shape[0] - 1, max_pairs)
        second = second + (second >= first)
        return float(np.mean(np.sum(left[first] * left[second], axis=1))), count
    count = left.shape[0] * right.shape[0]
    if count == 0:
        return float("nan"), 0
    if max_pairs is None or count <= max_pairs:
        return float((left @ right.T).mean()), count
    first = rng.integers(0, left.shape[0], max_pairs)
    second = rng.integers(0, right.shape[0], max_pairs)
    return float(np.mean(np.sum(left[first] * right[second], axis=1))), count


def _weighted(means: list[float], counts: list[int]) -> float:
    total = sum(counts)
    if total == 0:
        return float("nan")
    return float(sum(m * c for m, c in zip(means, counts, strict=True) if c) / total)


def embedding_structure(
    embeddings: npt.ArrayLike,
    labels: LabelMap | npt.ArrayLike,
    max_pairs: int | None,
    rng: Rng,
) -> EmbeddingStructure:
    """Estimate intra-class compactness and inter-class dispersion.

    Each bucket (a class's own pairs, or a class against the rest) is
    enumerated exactly when it holds at most max_pairs pairs and sampled
    otherwise. The overall values weight every bucket by its pair count.
    """
    grid = label_array(labels).reshape(-1)
    vectors = np.asarray(embeddings, dtype=np.float64)
    vectors = vectors.reshape(grid.shape[0], -1)
    keep = grid != IGNORE_LABEL
    vectors = vectors[keep]
    classes = grid[keep].astype(np.int64)

    intra_means, intra_counts = [], []
    inter_means, inter_counts = [], []
    per_class_intra: dict[int, float] = {}
    per_class_inter: dict[int, float] = {}
    for class_id in np.unique(classes):
        members = vectors[classes == class_id]
        others = vectors[classes != class_id]
        intra, intra_count = _pair_mean(members, None, max_pairs, rng)
        inter, inter_count = _pair_mean(members, others, max_pairs, rng)
        per_class_intra[int(class_id)] = intra
        per_class_inter[int(class_id)] = inter
        intra_means.append(intra)
        intra_counts.append(intra_count)
        inter_means.append(inter)
        inter_counts.append(inter_count)
    return EmbeddingStructure(
        intra=_weighted(intra_means, intra_counts),
        inter=_weighted(inter_means, inter_counts),
        per_class_intra=per_class_intra,
        per_class_inter=per_class_inter,
    )


@dataclass
class MetricRow:
    """One evaluation, as emitted to metrics.csv."""

    iteration: int
    miou: float
    per_class_iou: list[float]
    intra: float
    inter: float
    ce_loss: float
    nce_loss: float


def _format(value: float) -> str:
    return f"{value:.12g}"


class MetricsWriter:
    """CSV emitter for evaluation rows."""

    def __init__(self, handle: TextIO, num_classes: int) -> None:
        """Write the header."""
        self._writer = csv.writer(handle, lineterminator="\n")
        self._writer.writerow(
            [
                "iter",
                "miou",
                *(f"iou_{c}" for c in range(num_classes)),
                "intra",
                "inter",
                "ce_loss",
                "nce_loss",
            ]
        )

    def write(self, row: MetricRow) -> None:
        """Append one evaluation."""
        self._writer.writerow(
            [
                row.iteration,
                _format(row.miou),
                *(_format(v) for v in row.per_class_iou),
                _format(row.intra),
                _format(row.inter),
                _format(row.ce_loss),
                _format(row.nce_loss),
            ]
        )
