"""Anchor selection and positive/negative example mining."""

from __future__ import annotations

from collections.abc import Iterator, Sequence
from dataclasses import dataclass
import math
from typing import NamedTuple

import numpy as np
import numpy.typing as npt

from .const import (
    _LOGGER,
    ANCHOR_MODES,
    ANCHOR_SEG_AWARE,
    DEFAULT_ANCHORS_PER_CLASS,
    DEFAULT_K_NEG,
    DEFAULT_K_POS,
    DEFAULT_SEMI_HARD_FRACTION,
    IGNORE_LABEL,
    STRATEGIES,
    STRATEGY_HARDEST,
    STRATEGY_RANDOM,
    STRATEGY_SEMI_HARD,
)
from .core import LabelMap, Rng, Tensor, label_array
from .exceptions import ShapeMismatch


@dataclass(frozen=True)
class SamplingConfig:
    """How anchors and their examples are drawn."""

    strategy: str = STRATEGY_SEMI_HARD
    k_pos: int = DEFAULT_K_POS
    k_neg: int = DEFAULT_K_NEG
    anchors_per_class: int = DEFAULT_ANCHORS_PER_CLASS
    semi_hard_fraction: float = DEFAULT_SEMI_HARD_FRACTION
    anchor_mode: str = ANCHOR_SEG_AWARE

    def __post_init__(self) -> None:
        """Validate counts and enumerations."""
        if self.strategy not in STRATEGIES:
            raise ValueError(f"Unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")
        if self.anchor_mode not in ANCHOR_MODES:
            raise ValueError(
                f"Unknown anchor mode {self.anchor_mode!r}, expected one of {ANCHOR_MODES}"
            )
        if self.k_pos < 1 or self.k_neg < 1 or self.anchors_per_class < 1:
            raise ValueError("k_pos, k_neg and anchors_per_class must be positive")
        if not 0 < self.semi_hard_fraction <= 1:
            raise ValueError(
                f"semi_hard_fraction must be in (0, 1], got {self.semi_hard_fraction}"
            )


class Anchor(NamedTuple):
    """A single anchor pixel."""

    image_id: int
    pixel: tuple[int, int]
    class_id: int
    is_hard: bool


@dataclass(frozen=True)
class AnchorSet:
    """Anchors drawn from a batch, grouped class by class.

    batch_index and pixel_keys locate each anchor in the B x H x W batch
    (pixel_keys index the flattened batch).
    """

    image_ids: npt.NDArray[np.int64]
    batch_index: npt.NDArray[np.int64]
    rows: npt.NDArray[np.int64]
    cols: npt.NDArray[np.int64]
    classes: npt.NDArray[np.int64]
    is_hard: npt.NDArray[np.bool_]
    pixel_keys: npt.NDArray[np.int64]

    def __len__(self) -> int:
        """Return the number of anchors."""
        return int(self.classes.shape[0])

    def __iter__(self) -> Iterator[Anchor]:
        """Iterate anchors as tuples."""
        for i in range(len(self)):
            yield Anchor(
                int(self.image_ids[i]),
                (int(self.rows[i]), int(self.cols[i])),
                int(self.classes[i]),
                bool(self.is_hard[i]),
            )

    def hard_count(self, class_id: int) -> int:
        """Return how many anchors of a class came from the hard pool."""
        return int(np.sum(self.is_hard & (self.classes == class_id)))

    def class_count(self, class_id: int) -> int:
        """Return how many anchors of a class were drawn."""
        return int(np.sum(self.classes == class_id))


def _as_batch(labels: LabelMap | npt.ArrayLike) -> npt.NDArray:
    grid = label_array(labels)
    return grid[None] if grid.ndim == 2 else grid


def sample_anchors(
    labels: LabelMap | npt.ArrayLike,
    predictions: npt.ArrayLike,
    per_class: int,
    mode: str,
    rng: Rng,
    image_ids: Sequence[int] | None = None,
) -> AnchorSet:
    """Draw up to per_class anchors for every class present in the batch.

    In seg_aware mode half of them (rounded up) come from the class's
    misclassified pixels and the rest uniformly from the class's remaining
    pixels; a short hard pool is made up from the random side.
    """
    label_grid = _as_batch(labels)
    pred_grid = _as_batch(np.asarray(predictions))
    if label_grid.shape != pred_grid.shape:
        raise ShapeMismatch(
            f"Labels {label_grid.shape} do not match predictions {pred_grid.shape}"
        )
    if mode not in ANCHOR_MODES:
        raise ValueError(f"Unknown anchor mode {mode!r}, expected one of {ANCHOR_MODES}")
    batch, height, width = label_grid.shape
    ids = np.arange(batch) if image_ids is None else np.asarray(image_ids, dtype=np.int64)
    flat_labels = label_grid.reshape(-1).astype(np.int64)
    flat_preds = pred_grid.reshape(-1).astype(np.int64)

    chosen: list[npt.NDArray[np.int64]] = []
    hard_flags: list[npt.NDArray[np.bool_]] = []
    for class_id in np.unique(flat_labels):
        if class_id == IGNORE_LABEL:
            continue
        class_pixels = np.flatnonzero(flat_labels == class_id)
        total = min(per_class, class_pixels.shape[0])
        hard = np.zeros(0, dtype=np.int64)
        if mode == ANCHOR_SEG_AWARE:
            hard_pool = class_pixels[flat_preds[class_pixels] != class_id]
            hard_count = min(math.ceil(per_class / 2), hard_pool.shape[0])
            hard = rng.choice(hard_pool, hard_count).astype(np.int64)
        remaining = np.setdiff1d(class_pixels, hard, assume_unique=True)
        easy = rng.choice(remaining, total - hard.shape[0]).astype(np.int64)
        chosen.append(np.concatenate([hard, easy]))
        hard_flags.append(
            np.concatenate([np.ones(hard.shape[0], bool), np.zeros(easy.shape[0], bool)])
        )

    keys = np.concatenate(chosen) if chosen else np.zeros(0, dtype=np.int64)
    flags = np.concatenate(hard_flags) if hard_flags else np.zeros(0, dtype=bool)
    batch_index, rows, cols = np.unravel_index(keys, (batch, height, width))
    anchors = AnchorSet(
        image_ids=ids[batch_index],
        batch_index=batch_index.astype(np.int64),
        rows=rows.astype(np.int64),
        cols=cols.astype(np.int64),
        classes=flat_labels[keys],
        is_hard=flags,
        pixel_keys=keys,
    )
    _LOGGER.debug(
        f"Sampled {len(anchors)} anchors ({int(flags.sum())} hard) in {mode} mode"
    )
    return anchors


def pool_size(fraction: float, count: int) -> int:
    """Size of the semi-hard pool: ceil(fraction * count), at least 1."""
    if count <= 0:
        return 0
    # round first so 0.1 * 30 is 3, not 4
    return max(1, math.ceil(round(fraction * count, 9)))


def smallest_columns(values: npt.ArrayLike, m: int) -> npt.NDArray[np.int64]:
    """Column indices of the m smallest values per row, in stable sorted order.

    Equal to np.argsort(values, axis=1, kind="stable")[:, :m], ties included,
    without sorting whole rows.
    """
    matrix = np.atleast_2d(np.asarray(values, dtype=np.float64))
    rows, count = matrix.shape
    m = min(m, count)
    if m <= 0 or rows == 0:
        return np.zeros((rows, 0), dtype=np.int64)
    if m == count:
        return np.argsort(matrix, axis=1, kind="stable")
    kth = np.partition(matrix, m - 1, axis=1)[:, m - 1 : m]
    below = matrix < kth
    tied = matrix == kth
    # among values equal to the m-th smallest, the lowest columns win
    needed = m - below.sum(axis=1, keepdims=True)
    keep = below | (tied & (np.cumsum(tied, axis=1) <= needed))
    columns = np.nonzero(keep)[1].reshape(rows, m)
    chosen = np.take_along_axis(matrix, columns, axis=1)
    return np.take_along_axis(columns, np.argsort(chosen, axis=1, kind="stable"), axis=1)


def select_rows(
    scores: npt.ArrayLike,
    k: int,
    strategy: str,
    rng: Rng,
    prefer_high: bool,
    semi_hard_fraction: float = DEFAULT_SEMI_HARD_FRACTION,
    exclude: npt.NDArray[np.bool_] | None = None,
) -> npt.NDArray[np.int64]:
    """Pick k candidate columns per row of an anchor x candidate score matrix.

    prefer_high marks negatives, whose hardest candidates have the largest
    dot products; positives are hardest at the smallest. Excluded cells are
    never picked, and k is clamped to the smallest per-row availability so
    every row gets the same count.
    """
    matrix = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    rows, count = matrix.shape
    blocked = np.zeros_like(matrix, dtype=bool) if exclude is None else np.asarray(exclude)
    available = count - (int(blocked.sum(axis=1).max()) if rows else 0)
    if rows == 0 or available <= 0:
        return np.zeros((rows, 0), dtype=np.int64)

    if strategy == STRATEGY_RANDOM:
        keys = rng.random((rows, count))
        keys[blocked] = np.inf
        return smallest_columns(keys, min(k, available))

    hardness = -matrix if prefer_high else matrix.copy()
    hardness[blocked] = np.inf
    if strategy == STRATEGY_HARDEST:
        return smallest_columns(hardness, min(k, available))
    if strategy == STRATEGY_SEMI_HARD:
        size = pool_size(semi_hard_fraction, available)
        hardest = smallest_columns(hardness, size)
        keys = rng.random((rows, size))
        picks = smallest_columns(keys, min(k, size))
        return np.take_along_axis(hardest, picks, axis=1)
    raise ValueError(f"Unknown strategy {strategy!r}, expected one of {STRATEGIES}")


def select_examples(
    anchor: npt.ArrayLike,
    candidates_pos: npt.ArrayLike,
    candidates_neg: npt.ArrayLike,
    cfg: SamplingConfig,
    rng: Rng,
) -> tuple[Tensor, Tensor]:
    """Choose the positives and negatives one anchor is contrasted with."""
    vector = np.asarray(anchor, dtype=np.float64)
    dim = vector.shape[0]
    pos = np.asarray(candidates_pos, dtype=np.float64).reshape(-1, dim)
    neg = np.asarray(candidates_neg, dtype=np.float64).reshape(-1, dim)
    pos_idx = select_rows(
        (pos @ vector)[None, :],
        cfg.k_pos,
        cfg.strategy,
        rng,
        prefer_high=False,
        semi_hard_fraction=cfg.semi_hard_fraction,
    )
    neg_idx = select_rows(
        (neg @ vector)[None, :],
        cfg.k_neg,
        cfg.strategy,
        rng,
        prefer_high=True,
        semi_hard_fraction=cfg.semi_hard_fraction,
    )
    return pos[pos_idx[0]], neg[neg_idx[0]]
