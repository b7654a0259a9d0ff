"""Test the training loop, evaluation and ablation runs."""

import csv
from dataclasses import replace
import json
import os
from pathlib import Path
import time
from unittest.mock import patch

import numpy as np
import pytest

from pixelcontrast.config import TrainConfig, load_config
from pixelcontrast.const import (
    ABLATION_BASELINE_CE,
    ABLATIONS,
    ANCHOR_RANDOM,
    GRID_CONTRAST,
    GRID_GRAD_MODE,
    GRID_LAMBDA,
    GRID_MEMORY,
    GRID_SAMPLING,
    IGNORE_LABEL,
    MEMORY_CHECKPOINT_FILENAME,
    MEMORY_PIXEL,
    MEMORY_REGION,
    METRICS_FILENAME,
    MODEL_CHECKPOINT_FILENAME,
    NONFINITE_CHECKPOINT_FILENAME,
    REPORT_FILENAME,
    RESOLVED_CONFIG_FILENAME,
    SPLIT_TEST,
    SPLIT_TRAIN,
    STRATEGY_RANDOM,
)
from pixelcontrast.data import Dataset, SynthSpec, generate
from pixelcontrast.exceptions import EmptyDataset, NonFiniteLoss
from pixelcontrast.memory import load_bank
from pixelcontrast.model import PARAM_NAMES, load_checkpoint
from pixelcontrast.trainer import (
    ABLATION_GRIDS,
    AblationCell,
    AblationResult,
    ContrastTrainer,
    ablate,
    dataset_for,
    evaluate,
    summarize_ablation,
    train,
    write_ablation_csv,
)

CONFIG_DIR = Path(__file__).parent.parent / "config"


def _run(dataset: Dataset, config: TrainConfig) -> ContrastTrainer:
    trainer = ContrastTrainer(dataset, config)
    trainer.run()
    return trainer


def test_baseline_matches_zero_lambda(tiny_dataset: Dataset, tiny_config: TrainConfig):
    """Test baseline_ce and lambda 0 train bit-identical networks."""
    baseline = _run(tiny_dataset, tiny_config.with_overrides({"ablation": "baseline_ce"}))
    no_weight = _run(tiny_dataset, tiny_config.with_overrides({"lambda": "0"}))
    assert not baseline.contrast_enabled
    assert not no_weight.contrast_enabled
    for name in PARAM_NAMES:
        np.testing.assert_array_equal(baseline.net.params[name], no_weight.net.params[name])
    assert baseline.bank.stored_count() == 0


def test_contrast_changes_training(tiny_dataset: Dataset, tiny_config: TrainConfig):
    """Test the contrastive branch reaches the shared embedder."""
    baseline = _run(tiny_dataset, tiny_config.with_overrides({"ablation": "baseline_ce"}))
    joint = _run(tiny_dataset, tiny_config.with_overrides({"memory_mode": "none"}))
    assert not np.array_equal(baseline.net.params["embed_w1"], joint.net.params["embed_w1"])


def test_seed_changes_run(tiny_dataset: Dataset, tiny_config: TrainConfig):
    """Test different seeds initialize different networks."""
    first = ContrastTrainer(tiny_dataset, tiny_config)
    second = ContrastTrainer(tiny_dataset, tiny_config.with_overrides({"seed": "1"}))
    assert not np.array_equal(first.net.params["seg_w"], second.net.params["seg_w"])


def test_ce_terms_count_labeled_pixels(tiny_spec: SynthSpec, tiny_config: TrainConfig):
    """Test cross-entropy covers every non-IGNORE pixel of the batch."""
    dataset = generate(replace(tiny_spec, ignore_border=1))
    trainer = ContrastTrainer(dataset, tiny_config)
    step = trainer.step()
    assert step.ce_terms == 2 * 6 * 6
    assert step.iteration == 1
    assert np.all(dataset.labels[:, 0, :] == IGNORE_LABEL)


def test_cold_start_skips_anchors(tiny_dataset: Dataset, tiny_config: TrainConfig):
    """Test the first step has anchors but an empty memory to contrast with."""
    trainer = ContrastTrainer(tiny_dataset, tiny_config)
    first = trainer.step()
    assert first.anchors > 0
    assert first.nce_terms == 0
    assert first.loss == first.ce_loss
    assert trainer.bank.stored_count() > 0
    second = trainer.step()
    assert second.nce_terms > 0


def test_memory_is_read_before_update(tiny_dataset: Dataset, tiny_config: TrainConfig):
    """Test each step contrasts against the bank as the previous step left it."""
    trainer = ContrastTrainer(tiny_dataset, tiny_config)
    seen: list[int] = []
    snapshot = trainer.bank.snapshot

    def record(*args, **kwargs):
        pool = snapshot(*args, **kwargs)
        seen.append(len(pool))
        return pool

    with patch.object(trainer.bank, "snapshot", side_effect=record):
        for _ in range(4):
            before = trainer.bank.stored_count()
            trainer.step()
            assert seen[-1] == before


def test_queues_fill(tiny_dataset: Dataset, tiny_config: TrainConfig):
    """Test every class seen in training has queued embeddings."""
    trainer = _run(tiny_dataset, tiny_config)
    train_labels = tiny_dataset.labels[trainer.train_ids]
    for class_id in np.unique(train_labels):
        assert len(trainer.bank.pixel_queues[int(class_id)]) > 0
    assert trainer.bank.region_bank.valid.any()


def test_memory_none_uses_the_batch(tiny_dataset: Dataset, tiny_config: TrainConfig):
    """Test mini-batch contrast needs no warm-up and leaves the bank empty."""
    trainer = ContrastTrainer(tiny_dataset, tiny_config.with_overrides({"memory_mode": "none"}))
    step = trainer.step()
    assert step.nce_terms > 0
    assert step.nce_loss > 0
    assert trainer.bank.stored_count() == 0


def test_intra_image_groups_by_image(tiny_dataset: Dataset, tiny_config: TrainConfig):
    """Test intra_image restricts candidates to the anchor's own image."""
    trainer = ContrastTrainer(tiny_dataset, tiny_config.with_overrides({"ablation": "intra_image"}))
    with patch.object(trainer, "_contrast_group", wraps=trainer._contrast_group) as group:
        trainer.step()
        trainer.step()
    assert group.call_count > 0
    assert all(call.args[4] is not None for call in group.call_args_list)


def test_inter_image_pools_every_image(tiny_dataset: Dataset, tiny_config: TrainConfig):
    """Test inter_image contrasts against the whole memory."""
    trainer = ContrastTrainer(tiny_dataset, tiny_config)
    with patch.object(trainer, "_contrast_group", wraps=trainer._contrast_group) as group:
        trainer.step()
    assert all(call.args[4] is None for call in group.call_args_list)


def test_run_outputs(tmp_path, tiny_dataset: Dataset, tiny_config: TrainConfig):
    """Test a run directory holds everything needed to inspect and repeat it."""
    report = train(tiny_dataset, tiny_config, tmp_path)
    for name in (
        RESOLVED_CONFIG_FILENAME,
        METRICS_FILENAME,
        MODEL_CHECKPOINT_FILENAME,
        MEMORY_CHECKPOINT_FILENAME,
        REPORT_FILENAME,
    ):
        assert (tmp_path / name).is_file()
    with (tmp_path / METRICS_FILENAME).open() as handle:
        rows = list(csv.DictReader(handle))
    assert [row["iter"] for row in rows] == ["6", "12"]
    assert len(report.loss_curve) == 12
    assert [row.iteration for row in report.metric_rows] == [6, 12]
    summary = json.loads((tmp_path / REPORT_FILENAME).read_text())
    assert summary["final_miou"] == pytest.approx(report.final_miou)
    assert 0.0 <= report.final_miou <= 1.0
    assert load_checkpoint(tmp_path / MODEL_CHECKPOINT_FILENAME).proj_dim == 4
    assert load_bank(tmp_path / MEMORY_CHECKPOINT_FILENAME).num_classes == 3


def test_rerun_from_resolved_config(tmp_path, tiny_dataset: Dataset, tiny_config: TrainConfig):
    """Test the resolved config reproduces the run exactly."""
    first = train(tiny_dataset, tiny_config, tmp_path)
    config = load_config(tmp_path / RESOLVED_CONFIG_FILENAME)
    assert config == tiny_config
    second = train(tiny_dataset, config)
    assert second.loss_curve == first.loss_curve
    assert second.final_miou == first.final_miou or np.isnan(first.final_miou)


def test_nonfinite_loss(tmp_path, tiny_dataset: Dataset, tiny_config: TrainConfig):
    """Test a NaN loss stops training and dumps the network."""
    trainer = ContrastTrainer(tiny_dataset, tiny_config, tmp_path)
    with (
        patch("pixelcontrast.trainer.joint_loss", return_value=float("nan")),
        pytest.raises(NonFiniteLoss),
    ):
        trainer.step()
    assert (tmp_path / NONFINITE_CHECKPOINT_FILENAME).is_file()
    assert trainer.optimizer.iter == 0


def test_empty_training_split(tiny_dataset: Dataset, tiny_config: TrainConfig):
    """Test a dataset without training images raises EmptyDataset."""
    dataset = replace(tiny_dataset, splits=[SPLIT_TEST] * len(tiny_dataset))
    with pytest.raises(EmptyDataset):
        ContrastTrainer(dataset, tiny_config)


def test_batch_size_clamped(tiny_dataset: Dataset, tiny_config: TrainConfig):
    """Test a batch larger than the training split is clamped."""
    trainer = ContrastTrainer(tiny_dataset, tiny_config.with_overrides({"batch_size": "50"}))
    assert trainer.batch_size == len(tiny_dataset.train_ids)


def test_epochs_visit_every_image(all_train_dataset: Dataset, tiny_config: TrainConfig):
    """Test one epoch of batches covers each training image once."""
    trainer = ContrastTrainer(all_train_dataset, tiny_config.with_overrides({"batch_size": "3"}))
    batches = [trainer._next_batch() for _ in range(4)]
    assert [len(batch) for batch in batches] == [3, 3, 3, 1]
    assert sorted(sum(batches, [])) == list(range(10))


def test_evaluate_falls_back_to_train(all_train_dataset: Dataset, tiny_config: TrainConfig):
    """Test evaluating an empty test split scores the training images."""
    trainer = ContrastTrainer(all_train_dataset, tiny_config)
    result = evaluate(trainer.net, all_train_dataset)
    assert result.split == SPLIT_TRAIN
    assert result.confusion.total == 10 * 8 * 8
    assert -1.0 <= result.structure.inter <= 1.0


def test_ablation_grids():
    """Test the size and naming of every grid."""
    sizes = {name: len(cells) for name, cells in ABLATION_GRIDS.items()}
    assert sizes == {
        GRID_CONTRAST: 3,
        GRID_MEMORY: 4,
        GRID_SAMPLING: 6,
        GRID_LAMBDA: 3,
        GRID_GRAD_MODE: 2,
    }
    assert [cell.name for cell in ABLATION_GRIDS[GRID_CONTRAST]] == list(ABLATIONS)
    assert ABLATION_GRIDS[GRID_MEMORY][0].name == "mini_batch"
    assert ABLATION_GRIDS[GRID_LAMBDA][0].name == "lambda=0.1"


def test_ablate_without_cells(tiny_dataset: Dataset, tiny_config: TrainConfig):
    """Test an empty grid runs nothing."""
    assert ablate(tiny_dataset, tiny_config, []) == []


def test_ablate_order(tiny_dataset: Dataset, tiny_config: TrainConfig):
    """Test results come back cell-major and seed-minor."""
    config = tiny_config.with_overrides({"total_iter": "2", "eval_interval": "2"})
    results = ablate(tiny_dataset, config, ABLATION_GRIDS[GRID_CONTRAST], seeds=(0, 1))
    assert [(r.cell, r.seed) for r in results] == [
        (ablation, seed) for ablation in ABLATIONS for seed in (0, 1)
    ]
    assert all(0.0 <= r.final_miou <= 1.0 for r in results)


def test_ablation_csv(tmp_path):
    """Test per-seed rows are followed by one mean row per cell."""
    results = [
        AblationResult("lambda", "lambda=0.1", 0, 0.5, 0.8, 0.6, 0.1, 1.0),
        AblationResult("lambda", "lambda=0.1", 1, 0.7, 0.9, 0.8, 0.3, 2.0),
    ]
    summary = summarize_ablation(results)
    assert len(summary) == 1
    assert summary[0].final_miou == pytest.approx(0.6)
    assert summary[0].seed == -1
    path = tmp_path / "ablation.csv"
    write_ablation_csv(path, results)
    with path.open() as handle:
        rows = list(csv.DictReader(handle))
    assert [row["seed"] for row in rows] == ["0", "1", "mean"]
    assert float(rows[2]["miou"]) == pytest.approx(0.6)
    assert rows[2]["wall_clock"] == "3.000"


@pytest.mark.slow
def test_desk_ablation_directions():
    """Test the desk-scale ablations keep the expected orderings over three seeds."""
    config = load_config(CONFIG_DIR / "desk.cfg")
    # the defaults are inter-image contrast, pixel and region memory, seg-aware semi-hard
    cells = [
        AblationCell("check", "baseline_ce", (("ablation", ABLATION_BASELINE_CE),)),
        AblationCell("check", "inter_image"),
        AblationCell("check", "pixel", (("memory_mode", MEMORY_PIXEL),)),
        AblationCell("check", "region", (("memory_mode", MEMORY_REGION),)),
        AblationCell(
            "check",
            "random+random",
            (("sampling.anchor_mode", ANCHOR_RANDOM), ("sampling.strategy", STRATEGY_RANDOM)),
        ),
    ]
    start = time.monotonic()
    results = ablate(
        dataset_for(config), config, cells, seeds=range(3), jobs=min(4, os.cpu_count() or 1)
    )
    elapsed = time.monotonic() - start
    mean = {row.cell: row for row in summarize_ablation(results)}

    assert mean["inter_image"].final_miou > mean["baseline_ce"].final_miou
    assert mean["inter_image"].final_miou >= max(
        mean["pixel"].final_miou, mean["region"].final_miou
    )
    assert mean["inter_image"].final_miou >= mean["random+random"].final_miou
    assert mean["inter_image"].intra > mean["baseline_ce"].intra
    assert mean["inter_image"].inter < mean["baseline_ce"].inter
    assert elapsed < 300
