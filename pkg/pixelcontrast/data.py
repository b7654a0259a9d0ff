"""Synthetic segmentation data, its on-disk format and loading."""

from __future__ import annotations

import csv
from dataclasses import dataclass
import hashlib
from pathlib import Path
import time

import numpy as np
import numpy.typing as npt
import voluptuous as vol

from .const import (
    _LOGGER,
    DEFAULT_FEATURE_DIM,
    DEFAULT_IMAGE_SIZE,
    DEFAULT_NOISE_SIGMA,
    DEFAULT_NUM_CLASSES,
    DEFAULT_NUM_IMAGES,
    DEFAULT_OFFSET_AMPLITUDE,
    DEFAULT_OFFSET_CYCLES,
    IGNORE_LABEL,
    LAYOUT_BLOBS,
    LAYOUT_VORONOI,
    LAYOUTS,
    MANIFEST_FILENAME,
    MANIFEST_MAGIC,
    PROTOTYPES_FILENAME,
    SPLIT_TEST,
    SPLIT_TRAIN,
    TEST_SPLIT_MODULUS,
)
from .core import LabelMap, Rng, Tensor
from .exceptions import CorruptFile, InvalidSpec, MissingManifest

# Prototype spacing in units of noise sigma, with an absolute floor
PROTOTYPE_SEPARATION = 5.0
PROTOTYPE_MIN_DISTANCE = 1.0
PROTOTYPE_ATTEMPTS = 1000

MANIFEST_COLUMNS = ("id", "split", "features", "labels", "height", "width", "feature_dim")

_FEATURE_DTYPE = np.dtype("<f4")
_LABEL_DTYPE = np.dtype("u1")

SPEC_SCHEMA = vol.Schema(
    {
        vol.Required("num_images"): vol.All(int, vol.Range(min=1)),
        vol.Required("height"): vol.All(int, vol.Range(min=1)),
        vol.Required("width"): vol.All(int, vol.Range(min=1)),
        vol.Required("num_classes"): vol.All(int, vol.Range(min=1, max=IGNORE_LABEL - 1)),
        vol.Required("feature_dim"): vol.All(int, vol.Range(min=1)),
        vol.Required("noise_sigma"): vol.All(vol.Coerce(float), vol.Range(min=0)),
        vol.Required("layout"): vol.In(LAYOUTS),
        vol.Required("seed"): vol.All(int, vol.Range(min=0)),
        vol.Required("ignore_border"): vol.All(int, vol.Range(min=0)),
        vol.Required("offset_amplitude"): vol.All(vol.Coerce(float), vol.Range(min=0)),
        vol.Required("offset_cycles"): vol.All(vol.Coerce(float), vol.Range(min=0)),
        vol.Required("modes_per_class"): vol.All(int, vol.Range(min=1)),
    }
)


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic dataset."""

    num_images: int = DEFAULT_NUM_IMAGES
    height: int = DEFAULT_IMAGE_SIZE
    width: int = DEFAULT_IMAGE_SIZE
    num_classes: int = DEFAULT_NUM_CLASSES
    feature_dim: int = DEFAULT_FEATURE_DIM
    noise_sigma: float = DEFAULT_NOISE_SIGMA
    layout: str = LAYOUT_VORONOI
    seed: int = 0
    # width of the IGNORE frame painted around every label map
    ignore_border: int = 0
    # per-image smooth offset amplitude, in units of noise_sigma
    offset_amplitude: float = DEFAULT_OFFSET_AMPLITUDE
    # sinusoid periods across the image; below 1 each image sees a mostly one-sided offset
    offset_cycles: float = DEFAULT_OFFSET_CYCLES
    # prototypes per class; every Voronoi cell or blob draws one of its class's modes
    modes_per_class: int = 1

    def validate(self) -> None:
        """Raise InvalidSpec unless every field is in range."""
        try:
            SPEC_SCHEMA(dict(self.__dict__))
        except vol.Invalid as err:
            raise InvalidSpec(f"Invalid dataset spec: {err}") from err
        if 2 * self.ignore_border >= min(self.height, self.width):
            raise InvalidSpec(
                f"ignore_border {self.ignore_border} leaves no labeled pixels in a "
                f"{self.height}x{self.width} image"
            )


@dataclass
class Dataset:
    """Feature grids, label maps and the train/test assignment."""

    features: Tensor
    labels: npt.NDArray[np.uint8]
    splits: list[str]
    prototypes: Tensor
    num_classes: int
    modes_per_class: int = 1

    def __len__(self) -> int:
        """Return the number of images."""
        return int(self.labels.shape[0])

    @property
    def feature_dim(self) -> int:
        """Return F."""
        return int(self.features.shape[-1])

    @property
    def image_shape(self) -> tuple[int, int]:
        """Return (H, W)."""
        return int(self.labels.shape[1]), int(self.labels.shape[2])

    @property
    def prototype_classes(self) -> npt.NDArray[np.int64]:
        """Return the class of every prototype row."""
        return np.arange(self.prototypes.shape[0], dtype=np.int64) // self.modes_per_class

    def ids(self, split: str) -> list[int]:
        """Return the image ids assigned to a split."""
        return [i for i, assigned in enumerate(self.splits) if assigned == split]

    @property
    def train_ids(self) -> list[int]:
        """Return the training image ids."""
        return self.ids(SPLIT_TRAIN)

    @property
    def test_ids(self) -> list[int]:
        """Return the test image ids."""
        return self.ids(SPLIT_TEST)

    def label_map(self, image_id: int) -> LabelMap:
        """Return one image's labels as a LabelMap."""
        return LabelMap(self.labels[image_id], self.num_classes)

    def equals(self, other: Dataset) -> bool:
        """Return True when both datasets are bit-identical."""
        return (
            self.num_classes == other.num_classes
            and self.modes_per_class == other.modes_per_class
            and self.splits == other.splits
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.prototypes, other.prototypes)
        )


def _to_f32_grid(values: Tensor) -> Tensor:
    """Round to float32 so the stored file reproduces the values exactly."""
    return values.astype(_FEATURE_DTYPE).astype(np.float64)


def _make_prototypes(spec: SynthSpec, rng: Rng) -> Tensor:
    """One row per (class, mode), class-major."""
    distance = max(PROTOTYPE_MIN_DISTANCE, PROTOTYPE_SEPARATION * spec.noise_sigma)
    count, dim = spec.num_classes * spec.modes_per_class, spec.feature_dim
    if dim >= count:
        # orthonormal directions sit sqrt(2) apart
        basis, _ = np.linalg.qr(rng.normal(1.0, (dim, count)))
        return _to_f32_grid(basis.T * (distance / np.sqrt(2.0)))
    for _ in range(PROTOTYPE_ATTEMPTS):
        candidates = rng.normal(1.0, (count, dim)) * distance
        gaps = np.linalg.norm(candidates[:, None, :] - candidates[None, :, :], axis=-1)
        gaps[np.diag_indices(count)] = np.inf
        if gaps.min() > distance:
            return _to_f32_grid(candidates)
    raise InvalidSpec(
        f"Could not place {count} prototypes {distance:.3f} apart in {dim} dimensions"
    )


def _draw_modes(spec: SynthSpec, rng: Rng, count: int) -> npt.NDArray[np.int64]:
    if spec.modes_per_class == 1:
        return np.zeros(count, dtype=np.int64)
    return rng.integers(0, spec.modes_per_class, count)


def _voronoi_labels(
    spec: SynthSpec, rng: Rng
) -> tuple[npt.NDArray[np.int64], npt.NDArray[np.int64]]:
    """Class and mode of every pixel, from the nearest of a few random sites."""
    num_sites = int(rng.integers(spec.num_classes, 2 * spec.num_classes + 1))
    sites_y = rng.uniform(0, spec.height, num_sites)
    sites_x = rng.uniform(0, spec.width, num_sites)
    site_classes = rng.integers(0, spec.num_classes, num_sites)
    site_modes = _draw_modes(spec, rng, num_sites)
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width]
    distances = (yy[None] - sites_y[:, None, None]) ** 2 + (xx[None] - sites_x[:, None, None]) ** 2
    nearest = np.argmin(distances, axis=0)
    return site_classes[nearest], site_modes[nearest]


def _blob_labels(
    spec: SynthSpec, rng: Rng
) -> tuple[npt.NDArray[np.int64], npt.NDArray[np.int64]]:
    """Class and mode of every pixel: blobs of classes 1.. over a class 0 background."""
    labels = np.zeros((spec.height, spec.width), dtype=np.int64)
    modes = np.full_like(labels, int(_draw_modes(spec, rng, 1)[0]))
    if spec.num_classes == 1:
        return labels, modes
    size = min(spec.height, spec.width)
    num_blobs = int(rng.integers(1, spec.num_classes + 1))
    centers_y = rng.uniform(0, spec.height, num_blobs)
    centers_x = rng.uniform(0, spec.width, num_blobs)
    radii = rng.uniform(0.1 * size, 0.3 * size, num_blobs)
    blob_classes = rng.integers(1, spec.num_classes, num_blobs)
    blob_modes = _draw_modes(spec, rng, num_blobs)
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width]
    # squared distance in units of each blob's radius; inside when below 1
    scaled = (
        (yy[None] - centers_y[:, None, None]) ** 2 + (xx[None] - centers_x[:, None, None]) ** 2
    ) / radii[:, None, None] ** 2
    nearest = np.argmin(scaled, axis=0)
    inside = np.min(scaled, axis=0) <= 1.0
    labels[inside] = blob_classes[nearest[inside]]
    modes[inside] = blob_modes[nearest[inside]]
    return labels, modes


def _offset_field(spec: SynthSpec, rng: Rng) -> Tensor:
    """Low-frequency sinusoid along a random feature direction."""
    angle = rng.uniform(0.0, 2.0 * np.pi)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    direction = rng.normal(1.0, spec.feature_dim)
    direction /= max(np.linalg.norm(direction), 1e-12)
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width]
    wave = np.sin(
        2.0
        * np.pi
        * spec.offset_cycles
        * (np.cos(angle) * xx / spec.width + np.sin(angle) * yy / spec.height)
        + phase
    )
    amplitude = spec.offset_amplitude * spec.noise_sigma
    return amplitude * wave[..., None] * direction


def _split_for(image_id: int) -> str:
    digest = hashlib.sha256(f"image-{image_id}".encode()).digest()
    return SPLIT_TEST if digest[0] % TEST_SPLIT_MODULUS == 0 else SPLIT_TRAIN


def generate(spec: SynthSpec) -> Dataset:
    """Generate a dataset deterministically from its spec."""
    spec.validate()
    start_time = time.time()
    prototype_rng, layout_rng, noise_rng, offset_rng = Rng(spec.seed).spawn(4)
    prototypes = _make_prototypes(spec, prototype_rng)
    make_labels = _voronoi_labels if spec.layout == LAYOUT_VORONOI else _blob_labels

    features = np.empty(
        (spec.num_images, spec.height, spec.width, spec.feature_dim), dtype=np.float64
    )
    labels = np.empty((spec.num_images, spec.height, spec.width), dtype=np.uint8)
    for image_id in range(spec.num_images):
        classes, modes = make_labels(spec, layout_rng)
        noise = noise_rng.normal(spec.noise_sigma, (spec.height, spec.width, spec.feature_dim))
        features[image_id] = _to_f32_grid(
            prototypes[classes * spec.modes_per_class + modes]
            + noise
            + _offset_field(spec, offset_rng)
        )
        painted = classes.astype(np.uint8)
        if spec.ignore_border:
            border = spec.ignore_border
            painted[:border, :] = IGNORE_LABEL
            painted[-border:, :] = IGNORE_LABEL
            painted[:, :border] = IGNORE_LABEL
            painted[:, -border:] = IGNORE_LABEL
        labels[image_id] = painted

    splits = [_split_for(image_id) for image_id in range(spec.num_images)]
    if SPLIT_TRAIN not in splits:
        splits[0] = SPLIT_TRAIN
    elapsed = time.time() - start_time
    _LOGGER.info(
        f"Generated {spec.num_images} {spec.layout} images "
        f"({splits.count(SPLIT_TRAIN)} train, {splits.count(SPLIT_TEST)} test) in {elapsed:.2f}s"
    )
    return Dataset(
        features, labels, splits, prototypes, spec.num_classes, spec.modes_per_class
    )


def save(dataset: Dataset, directory: str | Path) -> Path:
    """Write the dataset as a manifest plus raw per-image files."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    height, width = dataset.image_shape
    (root / PROTOTYPES_FILENAME).write_bytes(dataset.prototypes.astype(_FEATURE_DTYPE).tobytes())
    manifest = root / MANIFEST_FILENAME
    with manifest.open("w", newline="") as handle:
        handle.write(f"{MANIFEST_MAGIC}\n")
        handle.write(f"# num_classes: {dataset.num_classes}\n")
        handle.write(f"# modes_per_class: {dataset.modes_per_class}\n")
        handle.write(f"# prototypes: {PROTOTYPES_FILENAME}\n")
        writer = csv.writer(handle, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for image_id in range(len(dataset)):
            feature_file = f"image_{image_id:05d}.f32"
            label_file = f"image_{image_id:05d}.u8"
            (root / feature_file).write_bytes(
                dataset.features[image_id].astype(_FEATURE_DTYPE).tobytes()
            )
            (root / label_file).write_bytes(dataset.labels[image_id].astype(_LABEL_DTYPE).tobytes())
            writer.writerow(
                (
                    image_id,
                    dataset.splits[image_id],
                    feature_file,
                    label_file,
                    height,
                    width,
                    dataset.feature_dim,
                )
            )
    _LOGGER.info(f"Saved {len(dataset)} images to {root}")
    return manifest


def _read_raw(path: Path, dtype: np.dtype, shape: tuple[int, ...]) -> npt.NDArray:
    if not path.is_file():
        raise MissingManifest(f"Manifest references missing file {path}")
    raw = path.read_bytes()
    expected = dtype.itemsize * int(np.prod(shape))
    if len(raw) != expected:
        raise CorruptFile(f"{path} holds {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape)


def load(directory: str | Path) -> Dataset:
    """Read a dataset written by save."""
    root = Path(directory)
    manifest = root / MANIFEST_FILENAME
    if not manifest.is_file():
        raise MissingManifest(f"No {MANIFEST_FILENAME} in {root}")
    lines = manifest.read_text().splitlines()
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise CorruptFile(f"{manifest} does not start with {MANIFEST_MAGIC!r}")
    meta: dict[str, str] = {}
    body = []
    for line in lines[1:]:
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            meta[key.strip()] = value.strip()
        elif line:
            body.append(line)
    rows = list(csv.reader(body, delimiter="\t"))
    if not rows or tuple(rows[0]) != MANIFEST_COLUMNS:
        raise CorruptFile(f"{manifest} has no {MANIFEST_COLUMNS} header")
    try:
        num_classes = int(meta["num_classes"])
        modes_per_class = int(meta.get("modes_per_class", "1"))
        entries = [
            (int(r[0]), r[1], r[2], r[3], int(r[4]), int(r[5]), int(r[6])) for r in rows[1:]
        ]
    except (KeyError, ValueError, IndexError) as err:
        raise CorruptFile(f"{manifest} is malformed: {err}") from err
    if not entries:
        raise CorruptFile(f"{manifest} lists no images")
    if [entry[0] for entry in entries] != list(range(len(entries))):
        raise CorruptFile(f"{manifest} image ids are not 0..{len(entries) - 1}")

    _, _, _, _, height, width, feature_dim = entries[0]
    features = np.empty((len(entries), height, width, feature_dim), dtype=np.float64)
    labels = np.empty((len(entries), height, width), dtype=np.uint8)
    splits = []
    for image_id, split, feature_file, label_file, h, w, f in entries:
        if (h, w, f) != (height, width, feature_dim):
            raise CorruptFile(f"Image {image_id} is {h}x{w}x{f}, expected {height}x{width}x{feature_dim}")
        if split not in (SPLIT_TRAIN, SPLIT_TEST):
            raise CorruptFile(f"Image {image_id} has unknown split {split!r}")
        features[image_id] = _read_raw(root / feature_file, _FEATURE_DTYPE, (h, w, f))
        labels[image_id] = _read_raw(root / label_file, _LABEL_DTYPE, (h, w))
        splits.append(split)
    bad = labels[(labels != IGNORE_LABEL) & (labels >= num_classes)]
    if bad.size:
        raise CorruptFile(f"Label {int(bad[0])} out of range for {num_classes} classes")
    prototypes = _read_raw(
        root / meta.get("prototypes", PROTOTYPES_FILENAME),
        _FEATURE_DTYPE,
        (num_classes * modes_per_class, feature_dim),
    ).astype(np.float64)
    _LOGGER.info(f"Loaded {len(entries)} images from {root}")
    return Dataset(features, labels, splits, prototypes, num_classes, modes_per_class)
