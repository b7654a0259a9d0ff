"""Joint cross-entropy and pixel contrast training, evaluation and ablations."""

from __future__ import annotations

from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
import csv
from dataclasses import asdict, dataclass, field
import json
import math
from pathlib import Path
import time
from typing import Any

import numpy as np
import numpy.typing as npt
from tqdm import tqdm

from . import data
from .config import TrainConfig, write_resolved_config
from .const import (
    _LOGGER,
    ABLATION_BASELINE_CE,
    ABLATION_INTER_IMAGE,
    ABLATION_INTRA_IMAGE,
    ABLATIONS,
    ANCHOR_MODES,
    DEFAULT_EMBEDDING_MAX_PAIRS,
    GRAD_MODES,
    GRID_CONTRAST,
    GRID_GRAD_MODE,
    GRID_LAMBDA,
    GRID_MEMORY,
    GRID_SAMPLING,
    LAMBDA_SWEEP,
    MEMORY_BOTH,
    MEMORY_CHECKPOINT_FILENAME,
    MEMORY_MODES,
    MEMORY_NONE,
    MEMORY_PIXEL,
    MEMORY_REGION,
    METRICS_FILENAME,
    MODEL_CHECKPOINT_FILENAME,
    NONFINITE_CHECKPOINT_FILENAME,
    REPORT_FILENAME,
    RESOLVED_CONFIG_FILENAME,
    SPLIT_TEST,
    SPLIT_TRAIN,
    STRATEGIES,
)
from .core import Rng, Tensor, l2_normalize_rows
from .data import Dataset
from .exceptions import EmptyDataset, NonFiniteLoss
from .losses import (
    LossWeights,
    cross_entropy_map,
    joint_loss,
    pixel_contrast_rows,
    pixel_contrast_score_grads,
)
from .memory import CandidatePool, MemoryBank, save_bank
from .metrics import (
    ConfusionMatrix,
    EmbeddingStructure,
    MetricRow,
    MetricsWriter,
    embedding_structure,
    mean_class_accuracy,
    miou,
    pixel_accuracy,
)
from .model import ForwardResult, OptimizerState, PixelNet, save_checkpoint, sgd_step
from .sampling import AnchorSet, sample_anchors, select_rows


@dataclass
class EvalResult:
    """Segmentation quality and embedding structure on one split."""

    split: str
    confusion: ConfusionMatrix
    miou: float
    per_class_iou: Tensor
    pixel_accuracy: float
    mean_class_accuracy: float
    structure: EmbeddingStructure


@dataclass
class StepResult:
    """What one optimizer step saw and did."""

    iteration: int
    loss: float
    ce_loss: float
    nce_loss: float
    ce_terms: int
    nce_terms: int
    anchors: int
    lr: float


@dataclass
class TrainReport:
    """Everything a run produced, apart from the network itself."""

    config: TrainConfig
    loss_curve: list[float] = field(default_factory=list)
    ce_curve: list[float] = field(default_factory=list)
    nce_curve: list[float] = field(default_factory=list)
    metric_rows: list[MetricRow] = field(default_factory=list)
    final_miou: float = float("nan")
    final_per_class_iou: list[float] = field(default_factory=list)
    final_pixel_accuracy: float = float("nan")
    final_structure: EmbeddingStructure | None = None
    wall_clock: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        """Return a JSON-ready view of the report."""
        return {
            "config": self.config.to_mapping(),
            "final_miou": self.final_miou,
            "final_per_class_iou": self.final_per_class_iou,
            "final_pixel_accuracy": self.final_pixel_accuracy,
            "final_structure": (
                asdict(self.final_structure) if self.final_structure is not None else None
            ),
            "loss_curve": self.loss_curve,
            "ce_curve": self.ce_curve,
            "nce_curve": self.nce_curve,
            "metric_rows": [asdict(row) for row in self.metric_rows],
            "wall_clock": self.wall_clock,
        }


def dataset_for(config: TrainConfig) -> Dataset:
    """Load data.path when set, otherwise generate the configured synthetic set."""
    if config.data_path:
        return data.load(config.data_path)
    return data.generate(config.synth)


def evaluate(
    net: PixelNet,
    dataset: Dataset,
    split: str = SPLIT_TEST,
    rng: Rng | None = None,
    max_pairs: int | None = DEFAULT_EMBEDDING_MAX_PAIRS,
) -> EvalResult:
    """Score a network on one split.

    Embedding structure is measured on the l2-normalized embedder output, the
    representation the segmentation head sees, not on the projection head.
    """
    ids = dataset.ids(split)
    if not ids:
        _LOGGER.warning(f"Split {split!r} is empty, evaluating on the training images")
        split = SPLIT_TRAIN
        ids = dataset.train_ids
    rng = rng if rng is not None else Rng(0)
    labels = dataset.labels[ids]
    result = net.forward(dataset.features[ids])
    predictions = np.argmax(result.logits, axis=-1)
    confusion = ConfusionMatrix(dataset.num_classes).update(labels, predictions)
    score, per_class = miou(confusion)
    normalized, _ = l2_normalize_rows(result.embeddings.reshape(-1, net.embed_dim))
    structure = embedding_structure(normalized, labels, max_pairs, rng)
    return EvalResult(
        split=split,
        confusion=confusion,
        miou=score,
        per_class_iou=per_class,
        pixel_accuracy=pixel_accuracy(confusion),
        mean_class_accuracy=mean_class_accuracy(confusion),
        structure=structure,
    )


class ContrastTrainer:
    """Runs the joint objective over a dataset for one configuration.

    The memory bank is written only after the optimizer step, so the
    candidates an iteration contrasts against always come from earlier
    iterations. Every source of randomness has its own stream, which keeps
    runs with the contrastive branch disabled bit-identical to plain
    cross-entropy training.
    """

    def __init__(
        self,
        dataset: Dataset,
        config: TrainConfig,
        output_dir: str | Path | None = None,
    ) -> None:
        """Initialize the network, optimizer and memory bank."""
        train_ids = dataset.train_ids
        if not train_ids:
            raise EmptyDataset("Dataset has no training images")
        self.dataset = dataset
        self.config = config
        self.output_dir = Path(output_dir) if output_dir is not None else None
        (
            init_rng,
            self._batch_rng,
            self._anchor_rng,
            self._selection_rng,
            self._memory_rng,
            self._eval_rng,
        ) = Rng(config.seed).spawn(6)
        self.net = PixelNet.initialize(
            init_rng,
            feature_dim=dataset.feature_dim,
            hidden_dim=config.hidden_dim,
            embed_dim=config.embed_dim,
            proj_dim=config.proj_dim,
            num_classes=dataset.num_classes,
        )
        self.optimizer = OptimizerState(
            base_lr=config.base_lr,
            total_iter=config.total_iter,
            momentum=config.momentum,
            weight_decay=config.weight_decay,
            power=config.lr_power,
        )
        self.weights = LossWeights(config.lambda_)
        self.train_ids = np.asarray(train_ids, dtype=np.int64)
        self.batch_size = min(config.batch_size, len(train_ids))
        if self.batch_size < config.batch_size:
            _LOGGER.warning(
                f"Batch size {config.batch_size} exceeds the {len(train_ids)} training "
                f"images, using {self.batch_size}"
            )
        self.bank = MemoryBank(
            dataset.num_classes,
            config.proj_dim,
            train_ids,
            config.queue_capacity(len(train_ids)),
            config.pixels_per_class,
        )
        self.contrast_enabled = (
            config.lambda_ > 0 and config.ablation != ABLATION_BASELINE_CE
        )
        self.iteration = 0
        self._epoch_order: list[int] = []
        self._cold_start_warned = False

    def _next_batch(self) -> list[int]:
        """Return the next images of the current epoch, reshuffling when spent."""
        if not self._epoch_order:
            order = self._batch_rng.choice(self.train_ids, self.train_ids.shape[0])
            self._epoch_order = [int(image_id) for image_id in order]
        batch = self._epoch_order[: self.batch_size]
        self._epoch_order = self._epoch_order[self.batch_size :]
        return batch

    def _candidate_pool(
        self, batch_ids: list[int], projections: Tensor, labels: npt.NDArray
    ) -> CandidatePool:
        mode = self.config.memory_mode
        if mode == MEMORY_NONE:
            return CandidatePool.from_batch(projections, labels, batch_ids)
        return self.bank.snapshot(
            include_pixels=mode in (MEMORY_PIXEL, MEMORY_BOTH),
            include_regions=mode in (MEMORY_REGION, MEMORY_BOTH),
        )

    def _contrast_group(
        self,
        pool: CandidatePool,
        vectors: Tensor,
        pixel_keys: npt.NDArray[np.int64],
        class_id: int,
        image_id: int | None,
    ) -> tuple[Tensor, Tensor] | None:
        """Losses and anchor gradients for anchors sharing a class (and image)."""
        config = self.config
        sampling = config.sampling
        positive_rows, negative_rows = pool.indices(class_id, image_id)
        exclude = None
        if config.memory_mode == MEMORY_NONE:
            # an anchor drawn from the batch is never its own positive
            exclude = pool.pixel_keys[positive_rows][None, :] == pixel_keys[:, None]
        positives = pool.vectors[positive_rows]
        negatives = pool.vectors[negative_rows]
        pos_scores = vectors @ positives.T / config.tau
        neg_scores = vectors @ negatives.T / config.tau
        pos_index = select_rows(
            pos_scores,
            sampling.k_pos,
            sampling.strategy,
            self._selection_rng,
            prefer_high=False,
            semi_hard_fraction=sampling.semi_hard_fraction,
            exclude=exclude,
        )
        if pos_index.shape[1] == 0:
            return None
        neg_index = select_rows(
            neg_scores,
            sampling.k_neg,
            sampling.strategy,
            self._selection_rng,
            prefer_high=True,
            semi_hard_fraction=sampling.semi_hard_fraction,
        )
        chosen_pos = np.take_along_axis(pos_scores, pos_index, axis=1)
        chosen_neg = np.take_along_axis(neg_scores, neg_index, axis=1)
        losses = pixel_contrast_rows(chosen_pos, chosen_neg)
        grad_pos, grad_neg = pixel_contrast_score_grads(chosen_pos, chosen_neg, config.grad_mode)
        grads = (
            np.einsum("ak,akd->ad", grad_pos, positives[pos_index])
            + np.einsum("ak,akd->ad", grad_neg, negatives[neg_index])
        ) / config.tau
        return losses, grads

    def _contrast(
        self, batch_ids: list[int], result: ForwardResult, labels: npt.NDArray
    ) -> tuple[Tensor, Tensor, AnchorSet]:
        """Contrastive terms of a batch and their unscaled projection gradients."""
        config = self.config
        predictions = np.argmax(result.logits, axis=-1)
        anchors = sample_anchors(
            labels,
            predictions,
            config.sampling.anchors_per_class,
            config.sampling.anchor_mode,
            self._anchor_rng,
            image_ids=batch_ids,
        )
        grad_projections = np.zeros_like(result.projections)
        if not len(anchors):
            return np.zeros(0), grad_projections, anchors

        pool = self._candidate_pool(batch_ids, result.projections, labels)
        anchor_vectors = result.projections[anchors.batch_index, anchors.rows, anchors.cols]
        if config.ablation == ABLATION_INTRA_IMAGE:
            group_images = anchors.image_ids
        else:
            group_images = np.full(len(anchors), -1, dtype=np.int64)
        groups = np.unique(np.stack([anchors.classes, group_images], axis=1), axis=0)

        losses: list[Tensor] = []
        skipped = 0
        for class_id, image_id in groups:
            members = np.flatnonzero((anchors.classes == class_id) & (group_images == image_id))
            outcome = self._contrast_group(
                pool,
                anchor_vectors[members],
                anchors.pixel_keys[members],
                int(class_id),
                None if image_id < 0 else int(image_id),
            )
            if outcome is None:
                skipped += members.shape[0]
                continue
            group_losses, group_grads = outcome
            losses.append(group_losses)
            np.add.at(
                grad_projections,
                (
                    anchors.batch_index[members],
                    anchors.rows[members],
                    anchors.cols[members],
                ),
                group_grads,
            )
        if skipped:
            message = f"Skipped {skipped} of {len(anchors)} anchors without positives"
            if not self._cold_start_warned:
                _LOGGER.warning(f"{message} at iteration {self.iteration}")
                self._cold_start_warned = True
            else:
                _LOGGER.debug(message)
        nce_losses = np.concatenate(losses) if losses else np.zeros(0)
        return nce_losses, grad_projections, anchors

    def _update_memory(
        self, batch_ids: list[int], projections: Tensor, labels: npt.NDArray
    ) -> None:
        mode = self.config.memory_mode
        for index, image_id in enumerate(batch_ids):
            if mode in (MEMORY_PIXEL, MEMORY_BOTH):
                self.bank.push_pixels(
                    image_id, projections[index], labels[index], self._memory_rng
                )
            if mode in (MEMORY_REGION, MEMORY_BOTH):
                self.bank.update_region(image_id, projections[index], labels[index])

    def _raise_nonfinite(self, loss: float, ce_loss: float, nce_loss: float) -> None:
        """Log the failing state, dump the network and raise."""
        _LOGGER.error(
            f"Non-finite loss {loss} at iteration {self.iteration} "
            f"(ce {ce_loss}, nce {nce_loss}, lr {self.optimizer.lr})"
        )
        if self.output_dir is not None:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(self.net, self.output_dir / NONFINITE_CHECKPOINT_FILENAME)
        raise NonFiniteLoss(f"Loss became {loss} at iteration {self.iteration}")

    def step(self) -> StepResult:
        """Run one iteration of the joint objective."""
        batch_ids = self._next_batch()
        labels = self.dataset.labels[batch_ids]
        result = self.net.forward(self.dataset.features[batch_ids])
        ce_losses, grad_logits, _ = cross_entropy_map(result.logits, labels)

        nce_losses: Tensor = np.zeros(0)
        grad_projections: Tensor | None = None
        anchor_count = 0
        if self.contrast_enabled:
            nce_losses, contrast_grads, anchors = self._contrast(batch_ids, result, labels)
            anchor_count = len(anchors)
            if nce_losses.size:
                grad_projections = contrast_grads * (self.weights.lambda_ / nce_losses.size)

        loss = joint_loss(ce_losses, nce_losses, self.weights)
        ce_loss = float(np.mean(ce_losses))
        nce_loss = float(np.mean(np.sort(nce_losses))) if nce_losses.size else 0.0
        if not math.isfinite(loss):
            self._raise_nonfinite(loss, ce_loss, nce_loss)

        grads = self.net.backward(result, grad_logits / ce_losses.size, grad_projections)
        lr = self.optimizer.lr
        self.net.params = sgd_step(self.optimizer, self.net.params, grads)
        if self.contrast_enabled and self.config.memory_mode != MEMORY_NONE:
            self._update_memory(batch_ids, result.projections, labels)
        self.iteration += 1
        return StepResult(
            iteration=self.iteration,
            loss=loss,
            ce_loss=ce_loss,
            nce_loss=nce_loss,
            ce_terms=int(ce_losses.size),
            nce_terms=int(nce_losses.size),
            anchors=anchor_count,
            lr=lr,
        )

    def evaluate(self, split: str = SPLIT_TEST) -> EvalResult:
        """Score the current network."""
        return evaluate(
            self.net, self.dataset, split, self._eval_rng, self.config.embedding_max_pairs
        )

    def _write_outputs(self, output_dir: Path, report: TrainReport) -> None:
        save_checkpoint(self.net, output_dir / MODEL_CHECKPOINT_FILENAME)
        save_bank(self.bank, output_dir / MEMORY_CHECKPOINT_FILENAME)
        (output_dir / REPORT_FILENAME).write_text(
            json.dumps(report.to_dict(), indent=2) + "\n"
        )

    def run(self) -> TrainReport:
        """Train for the configured number of iterations."""
        config = self.config
        start_time = time.time()
        report = TrainReport(config=config)
        handle = None
        writer = None
        if self.output_dir is not None:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            write_resolved_config(config, self.output_dir / RESOLVED_CONFIG_FILENAME)
            handle = (self.output_dir / METRICS_FILENAME).open("w", newline="")
            writer = MetricsWriter(handle, self.dataset.num_classes)

        _LOGGER.info(
            f"Training {self.net.num_parameters} parameters for {config.total_iter} "
            f"iterations ({config.ablation}, memory {config.memory_mode}, "
            f"lambda {config.lambda_}, seed {config.seed})"
        )
        window_ce: list[float] = []
        window_nce: list[float] = []
        evaluation: EvalResult | None = None
        try:
            while self.iteration < config.total_iter:
                step = self.step()
                report.loss_curve.append(step.loss)
                report.ce_curve.append(step.ce_loss)
                report.nce_curve.append(step.nce_loss)
                window_ce.append(step.ce_loss)
                window_nce.append(step.nce_loss)
                if step.iteration % config.eval_interval and step.iteration != config.total_iter:
                    continue
                evaluation = self.evaluate()
                row = MetricRow(
                    iteration=step.iteration,
                    miou=evaluation.miou,
                    per_class_iou=[float(v) for v in evaluation.per_class_iou],
                    intra=evaluation.structure.intra,
                    inter=evaluation.structure.inter,
                    ce_loss=float(np.mean(window_ce)),
                    nce_loss=float(np.mean(window_nce)),
                )
                report.metric_rows.append(row)
                if writer is not None and handle is not None:
                    writer.write(row)
                    handle.flush()
                _LOGGER.info(
                    f"Iteration {step.iteration}/{config.total_iter}: mIoU {row.miou:.4f}, "
                    f"ce {row.ce_loss:.4f}, nce {row.nce_loss:.4f}, lr {step.lr:.5f}"
                )
                window_ce.clear()
                window_nce.clear()
        finally:
            if handle is not None:
                handle.close()

        if evaluation is not None:
            report.final_miou = evaluation.miou
            report.final_per_class_iou = [float(v) for v in evaluation.per_class_iou]
            report.final_pixel_accuracy = evaluation.pixel_accuracy
            report.final_structure = evaluation.structure
        report.wall_clock = time.time() - start_time
        if self.output_dir is not None:
            self._write_outputs(self.output_dir, report)
        _LOGGER.info(
            f"Finished {config.total_iter} iterations with mIoU {report.final_miou:.4f} "
            f"in {report.wall_clock:.2f}s"
        )
        return report


def train(
    dataset: Dataset, config: TrainConfig, output_dir: str | Path | None = None
) -> TrainReport:
    """Train a fresh network on a dataset and report how it went."""
    return ContrastTrainer(dataset, config, output_dir).run()


@dataclass(frozen=True)
class AblationCell:
    """One row of an ablation table: a name and the config keys it changes."""

    grid: str
    name: str
    overrides: tuple[tuple[str, str], ...] = ()


@dataclass
class AblationResult:
    """Outcome of one cell under one seed."""

    grid: str
    cell: str
    seed: int
    final_miou: float
    pixel_accuracy: float
    intra: float
    inter: float
    wall_clock: float


def _memory_cell_name(mode: str) -> str:
    return "mini_batch" if mode == MEMORY_NONE else mode


ABLATION_GRIDS: dict[str, tuple[AblationCell, ...]] = {
    GRID_CONTRAST: tuple(
        AblationCell(GRID_CONTRAST, ablation, (("ablation", ablation),))
        for ablation in ABLATIONS
    ),
    GRID_MEMORY: tuple(
        AblationCell(
            GRID_MEMORY,
            _memory_cell_name(mode),
            (("ablation", ABLATION_INTER_IMAGE), ("memory_mode", mode)),
        )
        for mode in MEMORY_MODES
    ),
    GRID_SAMPLING: tuple(
        AblationCell(
            GRID_SAMPLING,
            f"{anchor_mode}+{strategy}",
            (("sampling.anchor_mode", anchor_mode), ("sampling.strategy", strategy)),
        )
        for anchor_mode in ANCHOR_MODES
        for strategy in STRATEGIES
    ),
    GRID_LAMBDA: tuple(
        AblationCell(GRID_LAMBDA, f"lambda={value}", (("lambda", repr(value)),))
        for value in LAMBDA_SWEEP
    ),
    GRID_GRAD_MODE: tuple(
        AblationCell(GRID_GRAD_MODE, mode, (("grad_mode", mode),)) for mode in GRAD_MODES
    ),
}


def _run_cell(task: tuple[Dataset, TrainConfig, AblationCell, int]) -> AblationResult:
    dataset, config, cell, seed = task
    report = train(dataset, config)
    structure = report.final_structure
    return AblationResult(
        grid=cell.grid,
        cell=cell.name,
        seed=seed,
        final_miou=report.final_miou,
        pixel_accuracy=report.final_pixel_accuracy,
        intra=structure.intra if structure is not None else float("nan"),
        inter=structure.inter if structure is not None else float("nan"),
        wall_clock=report.wall_clock,
    )


def ablate(
    dataset: Dataset,
    base_config: TrainConfig,
    cells: Sequence[AblationCell],
    seeds: Sequence[int] = (0,),
    jobs: int = 1,
    progress: bool = False,
) -> list[AblationResult]:
    """Train every cell under every seed, one independent run each.

    Results come back in cell-major, seed-minor order whatever jobs is.
    """
    tasks = [
        (
            dataset,
            base_config.with_overrides({**dict(cell.overrides), "seed": str(seed)}),
            cell,
            seed,
        )
        for cell in cells
        for seed in seeds
    ]
    if not tasks:
        return []
    start_time = time.time()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as executor:
            results = list(
                tqdm(
                    executor.map(_run_cell, tasks),
                    total=len(tasks),
                    desc="ablate",
                    disable=not progress,
                )
            )
    else:
        results = [
            _run_cell(task) for task in tqdm(tasks, desc="ablate", disable=not progress)
        ]
    elapsed = time.time() - start_time
    _LOGGER.info(f"Ran {len(results)} ablation runs over {len(cells)} cells in {elapsed:.2f}s")
    return results


def summarize_ablation(results: Sequence[AblationResult]) -> list[AblationResult]:
    """Average each cell over its seeds, keeping first-seen cell order.

    Summary rows carry seed -1.
    """
    grouped: dict[tuple[str, str], list[AblationResult]] = {}
    for result in results:
        grouped.setdefault((result.grid, result.cell), []).append(result)
    return [
        AblationResult(
            grid=grid,
            cell=cell,
            seed=-1,
            final_miou=float(np.mean([r.final_miou for r in runs])),
            pixel_accuracy=float(np.mean([r.pixel_accuracy for r in runs])),
            intra=float(np.mean([r.intra for r in runs])),
            inter=float(np.mean([r.inter for r in runs])),
            wall_clock=float(np.sum([r.wall_clock for r in runs])),
        )
        for (grid, cell), runs in grouped.items()
    ]


def write_ablation_csv(path: str | Path, results: Sequence[AblationResult]) -> None:
    """Write per-seed rows followed by one mean row per cell."""
    with Path(path).open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(
            ["grid", "cell", "seed", "miou", "pixel_accuracy", "intra", "inter", "wall_clock"]
        )
        for result in [*results, *summarize_ablation(results)]:
            writer.writerow(
                [
                    result.grid,
                    result.cell,
                    "mean" if result.seed < 0 else result.seed,
                    f"{result.final_miou:.12g}",
                    f"{result.pixel_accuracy:.12g}",
                    f"{result.intra:.12g}",
                    f"{result.inter:.12g}",
                    f"{result.wall_clock:.3f}",
                ]
            )
