"""Dense tensors, seeded random streams and elementary vector math."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TypeAlias

import numpy as np
import numpy.typing as npt
from scipy import special

from .const import IGNORE_LABEL, NORM_EPS
from .exceptions import LengthMismatch, ShapeMismatch, ZeroVector

Tensor: TypeAlias = npt.NDArray[np.float64]


class Rng:
    """Seeded random stream.

    Wraps a PCG64 generator so identical seeds give identical draws on every
    platform numpy supports. An instance is owned by a single caller; use
    spawn() to hand independent streams to other components.
    """

    def __init__(self, seed: int | np.random.SeedSequence) -> None:
        """Initialize the stream."""
        if isinstance(seed, np.random.SeedSequence):
            self._seed_sequence = seed
        else:
            self._seed_sequence = np.random.SeedSequence(seed)
        self.generator = np.random.Generator(np.random.PCG64(self._seed_sequence))

    def spawn(self, count: int) -> list[Rng]:
        """Split off count independent child streams."""
        return [Rng(child) for child in self._seed_sequence.spawn(count)]

    def random(self, size: int | tuple[int, ...] | None = None) -> npt.NDArray[np.float64]:
        """Draw uniform floats in [0, 1)."""
        return self.generator.random(size)

    def normal(
        self, scale: float = 1.0, size: int | tuple[int, ...] | None = None
    ) -> npt.NDArray[np.float64]:
        """Draw zero-mean Gaussian values."""
        return self.generator.normal(0.0, scale, size)

    def uniform(
        self, low: float, high: float, size: int | tuple[int, ...] | None = None
    ) -> npt.NDArray[np.float64]:
        """Draw uniform floats in [low, high)."""
        return self.generator.uniform(low, high, size)

    def integers(
        self, low: int, high: int, size: int | tuple[int, ...] | None = None
    ) -> npt.NDArray[np.int64]:
        """Draw integers in [low, high)."""
        return self.generator.integers(low, high, size)

    def choice(self, population: int | npt.ArrayLike, count: int) -> npt.NDArray:
        """Draw count items uniformly without replacement."""
        return self.generator.choice(population, size=count, replace=False)


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel class indices with IGNORE for unlabeled pixels."""

    labels: npt.NDArray[np.uint8]
    num_classes: int
    height: int = field(init=False)
    width: int = field(init=False)

    def __post_init__(self) -> None:
        """Validate and freeze the label array."""
        labels = np.array(self.labels, dtype=np.uint8)
        if labels.ndim != 2:
            raise ShapeMismatch(f"Label map must be 2-D, got shape {labels.shape}")
        labeled = labels[labels != IGNORE_LABEL]
        if labeled.size and int(labeled.max()) >= self.num_classes:
            raise ValueError(
                f"Label {int(labeled.max())} out of range for {self.num_classes} classes"
            )
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "height", labels.shape[0])
        object.__setattr__(self, "width", labels.shape[1])

    def present_classes(self) -> list[int]:
        """Return the sorted classes with at least one labeled pixel."""
        values = np.unique(self.labels)
        return [int(v) for v in values if v != IGNORE_LABEL]


def l2_normalize(v: npt.ArrayLike) -> Tensor:
    """Scale a vector to unit Euclidean norm."""
    vector = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(vector))
    if norm <= NORM_EPS:
        raise ZeroVector(f"Cannot normalize vector with norm {norm:.3e}")
    return vector / norm


def l2_normalize_rows(values: npt.ArrayLike) -> tuple[Tensor, Tensor]:
    """Normalize along the last axis, clipping the norm at NORM_EPS.

    Returns the normalized array and the clipped norms (last axis kept) so
    callers can reuse them for the Jacobian.
    """
    array = np.asarray(values, dtype=np.float64)
    norms = np.maximum(np.linalg.norm(array, axis=-1, keepdims=True), NORM_EPS)
    return array / norms, norms


def l2_normalize_rows_backward(
    normalized: Tensor, norms: Tensor, upstream: npt.ArrayLike
) -> Tensor:
    """Chain an upstream gradient through l2_normalize_rows.

    The Jacobian of x / |x| is (I - x_hat x_hat^T) / |x|.
    """
    grad = np.asarray(upstream, dtype=np.float64)
    return (grad - normalized * np.sum(normalized * grad, axis=-1, keepdims=True)) / norms


def softmax(y: npt.ArrayLike) -> Tensor:
    """Max-subtracted softmax over the last axis."""
    return special.softmax(np.asarray(y, dtype=np.float64), axis=-1)


def log_softmax(y: npt.ArrayLike) -> Tensor:
    """Log of softmax over the last axis."""
    return special.log_softmax(np.asarray(y, dtype=np.float64), axis=-1)


def dot(a: npt.ArrayLike, b: npt.ArrayLike) -> float:
    """Inner product summed left to right."""
    left = np.asarray(a, dtype=np.float64)
    right = np.asarray(b, dtype=np.float64)
    if left.shape != right.shape or left.ndim != 1:
        raise LengthMismatch(f"Cannot dot shapes {left.shape} and {right.shape}")
    total = 0.0
    for x, y in zip(left.tolist(), right.tolist(), strict=True):
        total += x * y
    return total


def check_same_grid(first: npt.ArrayLike, second: npt.ArrayLike) -> None:
    """Raise ShapeMismatch unless both arrays share their leading H x W."""
    first_shape = np.shape(label_array(first))
    second_shape = np.shape(label_array(second))
    if first_shape[:2] != second_shape[:2]:
        raise ShapeMismatch(
            f"Grid {first_shape[:2]} does not match grid {second_shape[:2]}"
        )


def label_array(labels: LabelMap | npt.ArrayLike) -> npt.NDArray:
    """Return the raw label array of a LabelMap or array-like."""
    if isinstance(labels, LabelMap):
        return labels.labels
    return np.asarray(labels)
