"""Pixel queues and region memory holding past embeddings."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
import threading

import numpy as np
import numpy.typing as npt

from .const import _LOGGER, DEFAULT_PIXELS_PER_CLASS, IGNORE_LABEL
from .core import LabelMap, Rng, Tensor, check_same_grid, l2_normalize, label_array
from .exceptions import CorruptFile, ZeroVector

# Entry kinds in a candidate pool
KIND_PIXEL = 0
KIND_REGION = 1
KIND_BATCH = 2

_HEADER_DTYPE = np.dtype("<u4")
_VALUE_DTYPE = np.dtype("<f8")


class PixelQueue:
    """FIFO of recent pixel embeddings for one class.

    Entries live in a ring buffer allocated on the first push; ptr is the
    next slot to write and filled the number of live entries.
    """

    def __init__(self, class_id: int, capacity: int) -> None:
        """Initialize an empty queue."""
        if capacity < 1:
            raise ValueError(f"Queue capacity must be positive, got {capacity}")
        self.class_id = class_id
        self.capacity = capacity
        self.buffer: Tensor | None = None
        self.sources = np.zeros(capacity, dtype=np.int64)
        self.ptr = 0
        self.filled = 0
        self.write_cursor = 0

    def __len__(self) -> int:
        """Return the number of stored entries."""
        return self.filled

    def _ensure_buffer(self, dim: int) -> Tensor:
        if self.buffer is None:
            self.buffer = np.zeros((self.capacity, dim), dtype=np.float64)
        elif self.buffer.shape[1] != dim:
            raise ValueError(f"Queue holds {self.buffer.shape[1]}-d entries, got {dim}-d")
        return self.buffer

    def push(self, vector: npt.ArrayLike, image_id: int) -> None:
        """Append one entry, evicting the oldest beyond capacity."""
        row = np.asarray(vector, dtype=np.float64)
        self.push_many(row[None, :], [image_id])

    def push_many(self, vectors: npt.ArrayLike, image_ids: npt.ArrayLike) -> None:
        """Append rows in order, as if pushed one at a time."""
        rows = np.asarray(vectors, dtype=np.float64)
        sources = np.asarray(image_ids, dtype=np.int64).reshape(-1)
        if rows.ndim != 2 or rows.shape[0] != sources.shape[0]:
            raise ValueError(f"Got {rows.shape} vectors for {sources.shape[0]} image ids")
        count = rows.shape[0]
        if count == 0:
            return
        buffer = self._ensure_buffer(rows.shape[1])
        # only the newest capacity rows survive
        take = min(self.capacity, count)
        start = (self.ptr + count - take) % self.capacity
        slots = (start + np.arange(take)) % self.capacity
        buffer[slots] = rows[-take:]
        self.sources[slots] = sources[-take:]
        self.ptr = (self.ptr + count) % self.capacity
        self.filled = min(self.capacity, self.filled + count)
        self.write_cursor += count

    def _order(self) -> npt.NDArray[np.int64]:
        """Slots of the live entries, oldest first."""
        return (self.ptr - self.filled + np.arange(self.filled)) % self.capacity

    @property
    def image_ids(self) -> npt.NDArray[np.int64]:
        """Return the source image of every entry, oldest first."""
        return self.sources[self._order()]

    def as_array(self, dim: int) -> Tensor:
        """Return the entries oldest first as a (size, dim) matrix."""
        if self.buffer is None:
            return np.zeros((0, dim), dtype=np.float64)
        return self.buffer[self._order()]


@dataclass
class RegionBank:
    """Average-pooled class embedding per (class, training image)."""

    entries: Tensor
    valid: npt.NDArray[np.bool_]

    @classmethod
    def empty(cls, num_classes: int, num_images: int, dim: int) -> RegionBank:
        """Return a bank with no valid entries."""
        return cls(
            entries=np.zeros((num_classes, num_images, dim), dtype=np.float64),
            valid=np.zeros((num_classes, num_images), dtype=bool),
        )


@dataclass(frozen=True)
class CandidatePool:
    """Immutable snapshot of contrast candidates.

    Rows are ordered pixel entries first (class-major, oldest first) and then
    region entries by (class, image). Memory entries carry pixel key -1; pools
    built from a mini-batch carry the flat pixel index so an anchor can skip itself.
    """

    vectors: Tensor
    classes: npt.NDArray[np.int64]
    image_ids: npt.NDArray[np.int64]
    kinds: npt.NDArray[np.int64]
    pixel_keys: npt.NDArray[np.int64]

    def __post_init__(self) -> None:
        """Freeze the arrays."""
        for name in ("vectors", "classes", "image_ids", "kinds", "pixel_keys"):
            array = np.array(getattr(self, name))
            array.setflags(write=False)
            object.__setattr__(self, name, array)

    def __len__(self) -> int:
        """Return the number of candidates."""
        return int(self.classes.shape[0])

    @classmethod
    def empty(cls, dim: int) -> CandidatePool:
        """Return a pool without candidates."""
        no_ints = np.zeros(0, dtype=np.int64)
        return cls(np.zeros((0, dim)), no_ints, no_ints, no_ints, no_ints)

    @classmethod
    def from_batch(
        cls,
        projections: npt.ArrayLike,
        labels: npt.ArrayLike,
        image_ids: Sequence[int],
    ) -> CandidatePool:
        """Build a pool from every labeled pixel of a mini-batch.

        projections is B x H x W x D and labels B x H x W; pixel keys index the
        flattened batch.
        """
        vectors = np.asarray(projections, dtype=np.float64)
        label_grid = np.asarray(labels)
        dim = vectors.shape[-1]
        flat_labels = label_grid.reshape(-1).astype(np.int64)
        flat_images = np.repeat(
            np.asarray(image_ids, dtype=np.int64), label_grid[0].size
        )
        keep = np.flatnonzero(flat_labels != IGNORE_LABEL)
        return cls(
            vectors=vectors.reshape(-1, dim)[keep],
            classes=flat_labels[keep],
            image_ids=flat_images[keep],
            kinds=np.full(keep.shape[0], KIND_BATCH, dtype=np.int64),
            pixel_keys=keep.astype(np.int64),
        )

    def indices(
        self, anchor_class: int, image_id: int | None = None
    ) -> tuple[npt.NDArray[np.int64], npt.NDArray[np.int64]]:
        """Return row indices of positives and negatives for an anchor class."""
        rows = np.ones(len(self), dtype=bool)
        if image_id is not None:
            rows &= self.image_ids == image_id
        same = self.classes == anchor_class
        return np.flatnonzero(rows & same), np.flatnonzero(rows & ~same)

    def split(
        self, anchor_class: int, image_id: int | None = None
    ) -> tuple[Tensor, Tensor]:
        """Return positive and negative vectors for an anchor class."""
        positive_rows, negative_rows = self.indices(anchor_class, image_id)
        return self.vectors[positive_rows], self.vectors[negative_rows]


class MemoryBank:
    """Per-class pixel queues plus the region memory.

    The training loop is the single writer. Readers take a snapshot() and
    work from that, so a step always sees the bank as it was after the
    previous step's update.
    """

    def __init__(
        self,
        num_classes: int,
        dim: int,
        image_ids: Sequence[int],
        queue_size: int,
        pixels_per_class: int = DEFAULT_PIXELS_PER_CLASS,
    ) -> None:
        """Initialize an empty bank for the given training images."""
        if pixels_per_class < 1:
            raise ValueError(f"pixels_per_class must be positive, got {pixels_per_class}")
        self.num_classes = num_classes
        self.dim = dim
        self.image_ids = [int(image_id) for image_id in image_ids]
        self._slots = {image_id: slot for slot, image_id in enumerate(self.image_ids)}
        self.queue_size = queue_size
        self.pixels_per_class = pixels_per_class
        self.pixel_queues = [PixelQueue(c, queue_size) for c in range(num_classes)]
        self.region_bank = RegionBank.empty(num_classes, len(self.image_ids), dim)
        self._state_lock = threading.Lock()  # single writer, snapshot readers

    @property
    def logical_size(self) -> tuple[int, int, int]:
        """Return |C| x (N + T) x D, the full capacity of the bank."""
        return (self.num_classes, len(self.image_ids) + self.queue_size, self.dim)

    def stored_count(self) -> int:
        """Return the number of entries currently usable as candidates."""
        with self._state_lock:
            queued = sum(len(queue) for queue in self.pixel_queues)
            return queued + int(self.region_bank.valid.sum())

    def _slot(self, image_id: int) -> int:
        try:
            return self._slots[int(image_id)]
        except KeyError as err:
            raise KeyError(f"Image {image_id} is not a training image of this bank") from err

    def push_pixels(
        self,
        image_id: int,
        embeddings: npt.ArrayLike,
        labels: LabelMap | npt.ArrayLike,
        rng: Rng,
    ) -> MemoryBank:
        """Enqueue up to V randomly chosen pixels of every class in an image."""
        check_same_grid(embeddings, labels)
        vectors = np.asarray(embeddings, dtype=np.float64).reshape(-1, self.dim)
        flat_labels = label_array(labels).reshape(-1)
        pushed = 0
        with self._state_lock:
            for class_id in np.unique(flat_labels):
                if class_id == IGNORE_LABEL:
                    continue
                pixels = np.flatnonzero(flat_labels == class_id)
                count = min(self.pixels_per_class, pixels.shape[0])
                chosen = rng.choice(pixels, count)
                self.pixel_queues[int(class_id)].push_many(
                    vectors[chosen], np.full(count, image_id, dtype=np.int64)
                )
                pushed += count
        _LOGGER.debug(f"Queued {pushed} pixel embeddings from image {image_id}")
        return self

    def update_region(
        self,
        image_id: int,
        embeddings: npt.ArrayLike,
        labels: LabelMap | npt.ArrayLike,
    ) -> MemoryBank:
        """Overwrite the region entries of every class present in an image.

        A class whose pooled mean is the zero vector has no direction to
        store; its entry keeps whatever the previous update wrote, and stays
        invalid if there was none.
        """
        check_same_grid(embeddings, labels)
        slot = self._slot(image_id)
        vectors = np.asarray(embeddings, dtype=np.float64).reshape(-1, self.dim)
        flat_labels = label_array(labels).reshape(-1)
        with self._state_lock:
            for class_id in np.unique(flat_labels):
                if class_id == IGNORE_LABEL:
                    continue
                pooled = vectors[flat_labels == class_id].mean(axis=0)
                try:
                    entry = l2_normalize(pooled)
                except ZeroVector:
                    _LOGGER.debug(
                        f"Region of class {class_id} in image {image_id} pooled to zero, "
                        "keeping previous entry"
                    )
                    continue
                self.region_bank.entries[int(class_id), slot] = entry
                self.region_bank.valid[int(class_id), slot] = True
        return self

    def snapshot(
        self, include_pixels: bool = True, include_regions: bool = True
    ) -> CandidatePool:
        """Copy the current entries into an immutable candidate pool."""
        vectors: list[Tensor] = []
        classes: list[npt.NDArray[np.int64]] = []
        image_ids: list[npt.NDArray[np.int64]] = []
        kinds: list[npt.NDArray[np.int64]] = []
        with self._state_lock:
            if include_pixels:
                for queue in self.pixel_queues:
                    size = len(queue)
                    vectors.append(queue.as_array(self.dim))
                    classes.append(np.full(size, queue.class_id, dtype=np.int64))
                    image_ids.append(np.array(queue.image_ids, dtype=np.int64))
                    kinds.append(np.full(size, KIND_PIXEL, dtype=np.int64))
            if include_regions:
                class_rows, slots = np.nonzero(self.region_bank.valid)
                vectors.append(self.region_bank.entries[class_rows, slots])
                classes.append(class_rows.astype(np.int64))
                image_ids.append(np.asarray(self.image_ids, dtype=np.int64)[slots])
                kinds.append(np.full(class_rows.shape[0], KIND_REGION, dtype=np.int64))
        if not vectors:
            return CandidatePool.empty(self.dim)
        all_classes = np.concatenate(classes)
        return CandidatePool(
            vectors=np.concatenate(vectors).reshape(-1, self.dim),
            classes=all_classes,
            image_ids=np.concatenate(image_ids),
            kinds=np.concatenate(kinds),
            pixel_keys=np.full(all_classes.shape[0], -1, dtype=np.int64),
        )

    def fetch_candidates(
        self, anchor_class: int, image_id: int | None = None
    ) -> tuple[Tensor, Tensor]:
        """Return (positives, negatives) for an anchor class.

        Positives are the class's queue entries then its valid region entries;
        negatives are the same for every other class. image_id restricts both
        to entries that came from that image.
        """
        return self.snapshot().split(anchor_class, image_id)


def save_bank(bank: MemoryBank, path: str | Path) -> None:
    """Write the bank as a flat little-endian dump.

    Layout: header (|C|, N, T, D as u32), queue lengths (|C| u32), queue
    entries (class-major, oldest first, f64), region grid (|C| x N x D f64),
    validity bitmap (packbits, little bit order), queue source image ids
    (u32 per queue entry), training image ids (N u32).
    """
    num_images = len(bank.image_ids)
    with bank._state_lock:
        lengths = [len(queue) for queue in bank.pixel_queues]
        queue_values = [queue.as_array(bank.dim) for queue in bank.pixel_queues]
        queue_images = [list(queue.image_ids) for queue in bank.pixel_queues]
        region = bank.region_bank.entries.copy()
        valid = bank.region_bank.valid.copy()
    chunks = [
        np.array(
            [bank.num_classes, num_images, bank.queue_size, bank.dim], dtype=_HEADER_DTYPE
        ).tobytes(),
        np.array(lengths, dtype=_HEADER_DTYPE).tobytes(),
        np.concatenate(queue_values).astype(_VALUE_DTYPE).tobytes(),
        region.astype(_VALUE_DTYPE).tobytes(),
        np.packbits(valid.reshape(-1), bitorder="little").tobytes(),
        np.array([i for ids in queue_images for i in ids], dtype=_HEADER_DTYPE).tobytes(),
        np.array(bank.image_ids, dtype=_HEADER_DTYPE).tobytes(),
    ]
    Path(path).write_bytes(b"".join(chunks))
    _LOGGER.info(f"Wrote memory bank ({sum(lengths)} queued, {int(valid.sum())} regions) to {path}")


def load_bank(
    path: str | Path, pixels_per_class: int = DEFAULT_PIXELS_PER_CLASS
) -> MemoryBank:
    """Read a bank written by save_bank."""
    raw = Path(path).read_bytes()
    offset = 0

    def take(dtype: np.dtype, count: int) -> npt.NDArray:
        nonlocal offset
        size = dtype.itemsize * count
        if offset + size > len(raw):
            raise CorruptFile(f"Memory dump {path} is truncated")
        values = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
        offset += size
        return values

    num_classes, num_images, queue_size, dim = (int(v) for v in take(_HEADER_DTYPE, 4))
    lengths = [int(v) for v in take(_HEADER_DTYPE, num_classes)]
    if any(length > queue_size for length in lengths):
        raise CorruptFile(f"Memory dump {path} has a queue longer than its capacity")
    total = sum(lengths)
    queue_values = take(_VALUE_DTYPE, total * dim).reshape(total, dim)
    region = take(_VALUE_DTYPE, num_classes * num_images * dim)
    bitmap = take(np.dtype("u1"), (num_classes * num_images + 7) // 8)
    queue_images = take(_HEADER_DTYPE, total)
    image_ids = take(_HEADER_DTYPE, num_images)
    if offset != len(raw):
        raise CorruptFile(f"Memory dump {path} has {len(raw) - offset} trailing bytes")

    bank = MemoryBank(num_classes, dim, image_ids.tolist(), queue_size, pixels_per_class)
    cursor = 0
    for queue, length in zip(bank.pixel_queues, lengths, strict=True):
        queue.push_many(
            queue_values[cursor : cursor + length], queue_images[cursor : cursor + length]
        )
        cursor += length
    bank.region_bank.entries[:] = region.reshape(num_classes, num_images, dim)
    bank.region_bank.valid[:] = np.unpackbits(
        bitmap, count=num_classes * num_images, bitorder="little"
    ).reshape(num_classes, num_images).astype(bool)
    return bank
