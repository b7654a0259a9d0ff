"""Segmentation and contrastive losses with their analytic gradients.

The contrastive terms are written in score space: a score is the anchor dot
product with a candidate divided by the temperature. The row functions take
one anchor per row, which is what the trainer feeds them; the single-anchor
operations are the one-row case.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
from scipy import special

from .const import (
    DEFAULT_LAMBDA,
    GRAD_MODE_EQ5,
    GRAD_MODE_EXACT,
    GRAD_MODES,
    IGNORE_LABEL,
    UNIT_NORM_TOL,
)
from .core import Tensor, log_softmax, softmax
from .exceptions import EmptyCeTerms, EmptyPositives, IgnoredPixel, ShapeMismatch


def _as_matrix(vectors: npt.ArrayLike, dim: int) -> Tensor:
    """Return vectors as a (count, dim) float64 matrix, allowing an empty set."""
    matrix = np.asarray(vectors, dtype=np.float64)
    if matrix.size == 0:
        return np.zeros((0, dim), dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != dim:
        raise ShapeMismatch(f"Expected vectors of length {dim}, got shape {matrix.shape}")
    return matrix


@dataclass(frozen=True)
class ContrastBatch:
    """One anchor embedding with its positive and negative sets."""

    anchor: Tensor
    positives: Tensor
    negatives: Tensor
    temperature: float

    def __post_init__(self) -> None:
        """Validate unit norms and temperature."""
        anchor = np.asarray(self.anchor, dtype=np.float64)
        if anchor.ndim != 1:
            raise ShapeMismatch(f"Anchor must be a vector, got shape {anchor.shape}")
        dim = anchor.shape[0]
        positives = _as_matrix(self.positives, dim)
        negatives = _as_matrix(self.negatives, dim)
        if not self.temperature > 0:
            raise ValueError(f"Temperature must be positive, got {self.temperature}")
        for name, vectors in (
            ("anchor", anchor[None, :]),
            ("positives", positives),
            ("negatives", negatives),
        ):
            norms = np.linalg.norm(vectors, axis=1)
            if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
                raise ValueError(f"All {name} must have unit norm")
        object.__setattr__(self, "anchor", anchor)
        object.__setattr__(self, "positives", positives)
        object.__setattr__(self, "negatives", negatives)


@dataclass(frozen=True)
class LossWeights:
    """Coefficient on the contrastive term of the joint objective."""

    lambda_: float = DEFAULT_LAMBDA

    def __post_init__(self) -> None:
        """Validate the coefficient."""
        if self.lambda_ < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lambda_}")


def cross_entropy(logits: npt.ArrayLike, truth: int) -> tuple[float, Tensor]:
    """Softmax cross-entropy for one pixel and its gradient at the logits."""
    if truth == IGNORE_LABEL:
        raise IgnoredPixel("Cross-entropy requested for an IGNORE pixel")
    values = np.asarray(logits, dtype=np.float64)
    if not 0 <= truth < values.shape[-1]:
        raise ValueError(f"Class {truth} out of range for {values.shape[-1]} logits")
    loss = -float(log_softmax(values)[truth])
    grad = softmax(values)
    grad[truth] -= 1.0
    return loss, grad


def cross_entropy_map(
    logits: npt.ArrayLike, labels: npt.ArrayLike
) -> tuple[Tensor, Tensor, npt.NDArray[np.bool_]]:
    """Cross-entropy over many pixels, skipping IGNORE.

    Returns the per-pixel losses of labeled pixels (in pixel order), the
    logit gradient for every pixel (zero rows where ignored) and the labeled mask.
    """
    values = np.asarray(logits, dtype=np.float64)
    truth = np.asarray(labels).astype(np.int64)
    if values.shape[:-1] != truth.shape:
        raise ShapeMismatch(f"Logits {values.shape} do not match labels {truth.shape}")
    valid = truth != IGNORE_LABEL
    flat_logits = values[valid]
    flat_truth = truth[valid]
    log_probs = log_softmax(flat_logits)
    rows = np.arange(flat_truth.shape[0])
    losses = -log_probs[rows, flat_truth]
    grads = np.zeros_like(values)
    flat_grads = np.exp(log_probs)
    flat_grads[rows, flat_truth] -= 1.0
    grads[valid] = flat_grads
    return losses, grads, valid


def _as_rows(scores: npt.ArrayLike, rows: int) -> Tensor:
    """Return scores as a (rows, count) matrix."""
    matrix = np.asarray(scores, dtype=np.float64)
    if matrix.ndim == 2:
        return matrix
    return matrix.reshape(rows, -1)


def _negative_lse(neg_scores: Tensor) -> Tensor:
    """Row-wise log-sum-exp of sorted negative scores, -inf for empty rows."""
    if neg_scores.shape[1] == 0:
        return np.full(neg_scores.shape[0], -np.inf)
    return special.logsumexp(np.sort(neg_scores, axis=1), axis=1)


def pixel_contrast_rows(pos_scores: npt.ArrayLike, neg_scores: npt.ArrayLike) -> Tensor:
    """Per-anchor contrastive loss with one positive per denominator.

    Each positive contributes log(1 + sum_n exp(s_n - s_p)); the loss is the
    mean of those terms. Negatives and terms are sorted before reduction so
    the result does not depend on candidate order.
    """
    pos = np.atleast_2d(np.asarray(pos_scores, dtype=np.float64))
    neg = _as_rows(neg_scores, pos.shape[0])
    if pos.shape[1] == 0:
        raise EmptyPositives("Contrastive loss needs at least one positive")
    terms = np.logaddexp(0.0, _negative_lse(neg)[:, None] - pos)
    return np.mean(np.sort(terms, axis=1), axis=1)


def pixel_contrast_score_grads(
    pos_scores: npt.ArrayLike, neg_scores: npt.ArrayLike, mode: str = GRAD_MODE_EXACT
) -> tuple[Tensor, Tensor]:
    """Derivatives of each row's loss with respect to its scores.

    In exact mode these are the true derivatives of pixel_contrast_rows. In
    eq5 mode the matching probabilities pool all positives and negatives in
    one softmax, which only agrees with exact mode for a single positive.
    """
    pos = np.atleast_2d(np.asarray(pos_scores, dtype=np.float64))
    neg = _as_rows(neg_scores, pos.shape[0])
    num_pos = pos.shape[1]
    if num_pos == 0:
        raise EmptyPositives("Contrastive gradient needs at least one positive")
    if mode == GRAD_MODE_EXACT:
        neg_lse = _negative_lse(neg)
        # weight of the negatives inside each positive's denominator
        weights = special.expit(neg_lse[:, None] - pos)
        grad_pos = -weights / num_pos
        if neg.shape[1] == 0:
            grad_neg = np.zeros_like(neg)
        else:
            grad_neg = (weights.sum(axis=1) / num_pos)[:, None] * softmax(neg)
        return grad_pos, grad_neg
    if mode == GRAD_MODE_EQ5:
        pooled = softmax(np.concatenate([pos, neg], axis=1))
        p_pos = pooled[:, :num_pos]
        p_neg = pooled[:, num_pos:]
        return -(1.0 - p_pos) / num_pos, p_neg
    raise ValueError(f"Unknown gradient mode {mode!r}, expected one of {GRAD_MODES}")


def contrast_loss(
    anchor: npt.ArrayLike,
    positives: npt.ArrayLike,
    negatives: npt.ArrayLike,
    temperature: float,
) -> float:
    """Contrastive loss of a raw anchor vector, without norm checks."""
    vector = np.asarray(anchor, dtype=np.float64)
    pos = _as_matrix(positives, vector.shape[0])
    neg = _as_matrix(negatives, vector.shape[0])
    pos_scores = (pos * vector).sum(axis=1) / temperature
    neg_scores = (neg * vector).sum(axis=1) / temperature
    return float(pixel_contrast_rows(pos_scores[None, :], neg_scores[None, :])[0])


def contrast_grad(
    anchor: npt.ArrayLike,
    positives: npt.ArrayLike,
    negatives: npt.ArrayLike,
    temperature: float,
    mode: str = GRAD_MODE_EXACT,
) -> Tensor:
    """Gradient of the contrastive loss at a raw anchor vector."""
    vector = np.asarray(anchor, dtype=np.float64)
    pos = _as_matrix(positives, vector.shape[0])
    neg = _as_matrix(negatives, vector.shape[0])
    pos_scores = (pos * vector).sum(axis=1) / temperature
    neg_scores = (neg * vector).sum(axis=1) / temperature
    grad_pos, grad_neg = pixel_contrast_score_grads(
        pos_scores[None, :], neg_scores[None, :], mode
    )
    return (grad_pos[0] @ pos + grad_neg[0] @ neg) / temperature


def info_nce(
    anchor: npt.ArrayLike,
    positive: npt.ArrayLike,
    negatives: npt.ArrayLike,
    temperature: float,
) -> float:
    """InfoNCE of one positive against a set of negatives."""
    if not temperature > 0:
        raise ValueError(f"Temperature must be positive, got {temperature}")
    return contrast_loss(anchor, np.atleast_2d(positive), negatives, temperature)


def pixel_contrast(batch: ContrastBatch) -> float:
    """Supervised pixel contrast averaged over the anchor's positives."""
    return contrast_loss(batch.anchor, batch.positives, batch.negatives, batch.temperature)


def pixel_contrast_grad(batch: ContrastBatch, mode: str = GRAD_MODE_EXACT) -> Tensor:
    """Gradient of pixel_contrast with respect to the anchor."""
    return contrast_grad(
        batch.anchor, batch.positives, batch.negatives, batch.temperature, mode
    )


def matching_probabilities(batch: ContrastBatch) -> tuple[Tensor, Tensor]:
    """Pooled matching probabilities of every positive and negative."""
    pos_scores = batch.positives @ batch.anchor / batch.temperature
    neg_scores = batch.negatives @ batch.anchor / batch.temperature
    pooled = softmax(np.concatenate([pos_scores, neg_scores]))
    return pooled[: pos_scores.shape[0]], pooled[pos_scores.shape[0] :]


def joint_loss(
    ce_terms: Sequence[float] | npt.ArrayLike,
    nce_terms: Sequence[float] | npt.ArrayLike,
    weights: LossWeights,
) -> float:
    """Mean cross-entropy plus lambda times mean contrastive loss."""
    ce = np.asarray(ce_terms, dtype=np.float64)
    nce = np.asarray(nce_terms, dtype=np.float64)
    if ce.size == 0:
        raise EmptyCeTerms("Joint loss needs at least one cross-entropy term")
    total = float(np.mean(ce))
    if nce.size == 0 or weights.lambda_ == 0:
        return total
    return total + weights.lambda_ * float(np.mean(nce))
