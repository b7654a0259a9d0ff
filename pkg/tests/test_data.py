"""Test synthetic data generation and the dataset format."""

from dataclasses import replace

import numpy as np
import pytest

from pixelcontrast.const import (
    IGNORE_LABEL,
    LAYOUT_BLOBS,
    MANIFEST_FILENAME,
    SPLIT_TEST,
    SPLIT_TRAIN,
)
from pixelcontrast.data import (
    PROTOTYPE_SEPARATION,
    Dataset,
    SynthSpec,
    generate,
    load,
    save,
)
from pixelcontrast.exceptions import CorruptFile, InvalidSpec, MissingManifest
from pixelcontrast.metrics import ConfusionMatrix, miou


def _min_gap(prototypes: np.ndarray) -> float:
    gaps = np.linalg.norm(prototypes[:, None, :] - prototypes[None, :, :], axis=-1)
    gaps[np.diag_indices(len(prototypes))] = np.inf
    return float(gaps.min())


def test_generate_is_deterministic(tiny_spec: SynthSpec, tiny_dataset: Dataset):
    """Test the same spec gives a bit-identical dataset."""
    assert generate(tiny_spec).equals(tiny_dataset)
    assert not generate(replace(tiny_spec, seed=1)).equals(tiny_dataset)


def test_generate_shapes(tiny_dataset: Dataset):
    """Test grid shapes, label range and split assignment."""
    assert tiny_dataset.features.shape == (10, 8, 8, 4)
    assert tiny_dataset.labels.shape == (10, 8, 8)
    assert tiny_dataset.image_shape == (8, 8)
    assert tiny_dataset.feature_dim == 4
    assert int(tiny_dataset.labels.max()) < 3
    assert set(tiny_dataset.splits) <= {SPLIT_TRAIN, SPLIT_TEST}
    assert sorted(tiny_dataset.train_ids + tiny_dataset.test_ids) == list(range(10))


def test_features_are_float32_exact(tiny_dataset: Dataset):
    """Test features survive a float32 round trip unchanged."""
    np.testing.assert_array_equal(
        tiny_dataset.features.astype(np.float32).astype(np.float64), tiny_dataset.features
    )


def test_ignore_border(tiny_spec: SynthSpec):
    """Test the IGNORE frame covers exactly the border pixels."""
    dataset = generate(replace(tiny_spec, ignore_border=2))
    frame = np.ones((8, 8), dtype=bool)
    frame[2:-2, 2:-2] = False
    assert np.all(dataset.labels[:, frame] == IGNORE_LABEL)
    assert np.all(dataset.labels[:, ~frame] != IGNORE_LABEL)


def test_single_image_is_train(tiny_spec: SynthSpec):
    """Test a dataset always has a training image."""
    for seed in range(5):
        dataset = generate(replace(tiny_spec, num_images=1, seed=seed))
        assert dataset.splits == [SPLIT_TRAIN]


def test_prototypes_are_separated(tiny_spec: SynthSpec):
    """Test class prototypes sit at least the separation distance apart."""
    distance = PROTOTYPE_SEPARATION * tiny_spec.noise_sigma
    assert _min_gap(generate(tiny_spec).prototypes) >= distance * (1 - 1e-6)
    crowded = generate(replace(tiny_spec, num_classes=5, feature_dim=2, num_images=2))
    assert crowded.prototypes.shape == (5, 2)
    assert _min_gap(crowded.prototypes) > distance


def test_blob_layout(tiny_spec: SynthSpec):
    """Test the blob layout paints blobs over a class 0 background."""
    dataset = generate(replace(tiny_spec, layout=LAYOUT_BLOBS, height=16, width=16))
    assert dataset.labels.shape == (10, 16, 16)
    assert int(dataset.labels.max()) < 3
    assert (dataset.labels == 0).any()


@pytest.mark.parametrize(
    "changes",
    [
        {"num_images": 0},
        {"num_classes": 0},
        {"noise_sigma": -1.0},
        {"layout": "stripes"},
        {"ignore_border": 4},
        {"modes_per_class": 0},
        {"offset_cycles": -1.0},
    ],
)
def test_invalid_spec(tiny_spec: SynthSpec, changes: dict):
    """Test out-of-range specs raise InvalidSpec."""
    with pytest.raises(InvalidSpec):
        generate(replace(tiny_spec, **changes))


def test_save_and_load(tmp_path, tiny_dataset: Dataset):
    """Test a saved dataset reloads bit-identically."""
    manifest = save(tiny_dataset, tmp_path / "data")
    assert manifest.name == MANIFEST_FILENAME
    assert load(tmp_path / "data").equals(tiny_dataset)


def test_load_missing_manifest(tmp_path):
    """Test loading an empty directory raises MissingManifest."""
    with pytest.raises(MissingManifest):
        load(tmp_path)


def test_load_missing_image(tmp_path, tiny_dataset: Dataset):
    """Test a manifest naming an absent file raises MissingManifest."""
    save(tiny_dataset, tmp_path)
    (tmp_path / "image_00003.u8").unlink()
    with pytest.raises(MissingManifest):
        load(tmp_path)


def test_load_truncated_image(tmp_path, tiny_dataset: Dataset):
    """Test a short feature file raises CorruptFile."""
    save(tiny_dataset, tmp_path)
    path = tmp_path / "image_00002.f32"
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CorruptFile):
        load(tmp_path)


def test_load_bad_magic(tmp_path, tiny_dataset: Dataset):
    """Test a manifest without the magic line raises CorruptFile."""
    manifest = save(tiny_dataset, tmp_path)
    manifest.write_text(manifest.read_text().split("\n", 1)[1])
    with pytest.raises(CorruptFile):
        load(tmp_path)


def test_noiseless_pixels_sit_on_prototypes():
    """Test zero noise puts every pixel exactly on a prototype of its class."""
    spec = SynthSpec(num_images=4, height=12, width=12, noise_sigma=0.0, modes_per_class=2)
    dataset = generate(spec)
    assert dataset.prototypes.shape == (2 * spec.num_classes, spec.feature_dim)
    gaps = np.linalg.norm(
        dataset.features[..., None, :] - dataset.prototypes, axis=-1
    )
    own_class = dataset.prototype_classes == dataset.labels[..., None]
    assert np.all(np.min(np.where(own_class, gaps, np.inf), axis=-1) == 0.0)


def test_noise_has_requested_sigma():
    """Test the empirical noise deviation over 10^5 values is within 10 percent."""
    spec = SynthSpec(
        num_images=10, height=32, width=32, feature_dim=10, noise_sigma=0.5, offset_amplitude=0.0
    )
    dataset = generate(spec)
    residual = dataset.features - dataset.prototypes[dataset.labels]
    assert residual.size >= 100_000
    assert abs(float(residual.mean())) < 0.01
    assert float(residual.std()) == pytest.approx(0.5, rel=0.1)


@pytest.mark.parametrize("modes_per_class", [1, 2])
def test_nearest_prototype_is_perfect_without_noise(modes_per_class: int):
    """Test classifying by nearest prototype scores mIoU 1 on noiseless data."""
    spec = SynthSpec(
        num_images=64,
        height=32,
        width=32,
        num_classes=5,
        noise_sigma=0.0,
        modes_per_class=modes_per_class,
    )
    dataset = generate(spec)
    gaps = np.linalg.norm(dataset.features[..., None, :] - dataset.prototypes, axis=-1)
    prediction = dataset.prototype_classes[np.argmin(gaps, axis=-1)]
    score, per_class = miou(ConfusionMatrix(5).update(dataset.labels, prediction))
    assert score == 1.0
    assert not np.isnan(per_class).any()


def test_modes_are_separated_and_saved(tmp_path, tiny_spec: SynthSpec):
    """Test every class mode gets its own separated prototype and survives a save."""
    spec = replace(tiny_spec, modes_per_class=3, feature_dim=12)
    dataset = generate(spec)
    assert dataset.prototypes.shape == (9, 12)
    assert dataset.prototype_classes.tolist() == [0, 0, 0, 1, 1, 1, 2, 2, 2]
    assert _min_gap(dataset.prototypes) >= PROTOTYPE_SEPARATION * spec.noise_sigma * (1 - 1e-6)
    save(dataset, tmp_path / "data")
    reloaded = load(tmp_path / "data")
    assert reloaded.modes_per_class == 3
    assert reloaded.equals(dataset)
