"""Test segmentation and contrastive losses."""

import math

import mpmath
import numpy as np
import pytest

from pixelcontrast.const import GRAD_MODE_EQ5, GRAD_MODE_EXACT, IGNORE_LABEL
from pixelcontrast.core import Rng, l2_normalize_rows
from pixelcontrast.exceptions import EmptyCeTerms, EmptyPositives, IgnoredPixel
from pixelcontrast.gradcheck import numeric_gradient
from pixelcontrast.losses import (
    ContrastBatch,
    LossWeights,
    contrast_loss,
    cross_entropy,
    cross_entropy_map,
    info_nce,
    joint_loss,
    matching_probabilities,
    pixel_contrast,
    pixel_contrast_grad,
    pixel_contrast_rows,
)

from .const import MPMATH_DIGITS


def _unit(rng: Rng, count: int, dim: int) -> np.ndarray:
    return l2_normalize_rows(rng.normal(1.0, (count, dim)))[0]


def _batch(rng: Rng, positives: int, negatives: int, dim: int = 6, tau: float = 0.1):
    return ContrastBatch(
        anchor=_unit(rng, 1, dim)[0],
        positives=_unit(rng, positives, dim),
        negatives=_unit(rng, negatives, dim),
        temperature=tau,
    )


def _oracle(batch: ContrastBatch) -> float:
    """Pixel contrast evaluated in arbitrary precision."""
    with mpmath.workdps(MPMATH_DIGITS):
        tau = mpmath.mpf(batch.temperature)
        anchor = [mpmath.mpf(float(v)) for v in batch.anchor]

        def score(vector):
            return mpmath.fsum(a * mpmath.mpf(float(v)) for a, v in zip(anchor, vector)) / tau

        negatives = mpmath.fsum(mpmath.exp(score(n)) for n in batch.negatives)
        terms = [
            -mpmath.log(mpmath.exp(score(p)) / (mpmath.exp(score(p)) + negatives))
            for p in batch.positives
        ]
        return float(mpmath.fsum(terms) / len(terms))


def test_pixel_contrast_matches_oracle(rng: Rng):
    """Test the contrastive loss against an arbitrary-precision reference."""
    for _ in range(100):
        batch = _batch(
            rng, positives=int(rng.integers(1, 7)), negatives=int(rng.integers(0, 12))
        )
        assert pixel_contrast(batch) == pytest.approx(_oracle(batch), rel=1e-12)


def test_pixel_contrast_extreme_temperature(rng: Rng):
    """Test tiny temperatures stay finite and accurate."""
    batch = _batch(rng, positives=3, negatives=5, tau=0.01)
    value = pixel_contrast(batch)
    assert math.isfinite(value)
    assert value == pytest.approx(_oracle(batch), rel=1e-10, abs=1e-12)


def test_info_nce_matches_oracle(rng: Rng):
    """Test InfoNCE is the one-positive case."""
    batch = _batch(rng, positives=1, negatives=7)
    value = info_nce(batch.anchor, batch.positives[0], batch.negatives, batch.temperature)
    assert value == pytest.approx(_oracle(batch), rel=1e-12)


def test_pixel_contrast_symmetric_case():
    """Test equal positive and negative scores give ln 2."""
    basis = np.eye(3)
    batch = ContrastBatch(basis[0], basis[1:2], basis[2:3], temperature=0.1)
    assert pixel_contrast(batch) == pytest.approx(math.log(2.0), abs=1e-15)


def test_pixel_contrast_without_negatives(rng: Rng):
    """Test an empty negative set gives exactly zero loss and gradient."""
    batch = _batch(rng, positives=3, negatives=0)
    assert pixel_contrast(batch) == 0.0
    np.testing.assert_array_equal(pixel_contrast_grad(batch), np.zeros(6))


def test_pixel_contrast_requires_positives(rng: Rng):
    """Test an empty positive set raises EmptyPositives."""
    batch = _batch(rng, positives=0, negatives=3)
    with pytest.raises(EmptyPositives):
        pixel_contrast(batch)


def test_pixel_contrast_ignores_candidate_order(rng: Rng):
    """Test permuting candidates leaves the loss bit-identical."""
    batch = _batch(rng, positives=6, negatives=11)
    shuffled = ContrastBatch(
        batch.anchor,
        batch.positives[::-1],
        batch.negatives[rng.choice(11, 11)],
        batch.temperature,
    )
    assert pixel_contrast(shuffled) == pixel_contrast(batch)


def test_contrast_batch_validation(rng: Rng):
    """Test non-unit vectors and bad temperatures are rejected."""
    basis = np.eye(3)
    with pytest.raises(ValueError):
        ContrastBatch(2.0 * basis[0], basis[1:2], basis[2:3], temperature=0.1)
    with pytest.raises(ValueError):
        ContrastBatch(basis[0], basis[1:2], basis[2:3], temperature=0.0)


def test_exact_gradient_matches_finite_differences(rng: Rng):
    """Test the exact anchor gradient against central differences."""
    batch = _batch(rng, positives=4, negatives=6, tau=0.5)
    numeric = numeric_gradient(
        lambda anchor: contrast_loss(anchor, batch.positives, batch.negatives, 0.5),
        batch.anchor,
    )
    analytic = pixel_contrast_grad(batch, GRAD_MODE_EXACT)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-8)


def test_eq5_matches_exact_for_one_positive(rng: Rng):
    """Test both gradient modes agree with a single positive."""
    batch = _batch(rng, positives=1, negatives=8)
    np.testing.assert_allclose(
        pixel_contrast_grad(batch, GRAD_MODE_EQ5),
        pixel_contrast_grad(batch, GRAD_MODE_EXACT),
        rtol=1e-10,
        atol=1e-12,
    )


def test_eq5_differs_with_several_positives(rng: Rng):
    """Test the pooled gradient is not the exact one for several positives."""
    batch = _batch(rng, positives=5, negatives=8, tau=0.5)
    eq5 = pixel_contrast_grad(batch, GRAD_MODE_EQ5)
    exact = pixel_contrast_grad(batch, GRAD_MODE_EXACT)
    assert not np.allclose(eq5, exact)


def _eq5_oracle(batch: ContrastBatch) -> np.ndarray:
    """Pooled-probability anchor gradient written out term by term."""
    with mpmath.workdps(MPMATH_DIGITS):
        tau = mpmath.mpf(batch.temperature)
        anchor = [mpmath.mpf(float(v)) for v in batch.anchor]

        def dot(vector):
            return mpmath.fsum(a * mpmath.mpf(float(v)) for a, v in zip(anchor, vector))

        pos_weights = [mpmath.exp(dot(p) / tau) for p in batch.positives]
        neg_weights = [mpmath.exp(dot(n) / tau) for n in batch.negatives]
        total = mpmath.fsum(pos_weights) + mpmath.fsum(neg_weights)
        grad = []
        for d in range(len(anchor)):
            pushed = mpmath.fsum(
                w / total * mpmath.mpf(float(n[d]))
                for w, n in zip(neg_weights, batch.negatives)
            )
            bracket = mpmath.fsum(
                (1 - w / total) * mpmath.mpf(float(p[d])) - pushed
                for w, p in zip(pos_weights, batch.positives)
            )
            grad.append(float(-bracket / (tau * len(batch.positives))))
        return np.array(grad)


def test_eq5_matches_transcription(rng: Rng):
    """Test the pooled gradient mode against a term-by-term reference."""
    for _ in range(100):
        batch = _batch(
            rng,
            positives=int(rng.integers(1, 7)),
            negatives=int(rng.integers(0, 12)),
            tau=float(rng.uniform(0.05, 1.0)),
        )
        np.testing.assert_allclose(
            pixel_contrast_grad(batch, GRAD_MODE_EQ5), _eq5_oracle(batch), rtol=0, atol=1e-10
        )


def test_worked_example():
    """Test the two-dimensional example with anchor (0.6, 0.8) at temperature 0.1."""
    batch = ContrastBatch(
        anchor=np.array([0.6, 0.8]),
        positives=np.array([[1.0, 0.0]]),
        negatives=np.array([[0.0, 1.0]]),
        temperature=0.1,
    )
    # scores are 6 and 8
    assert pixel_contrast(batch) == pytest.approx(math.log1p(math.exp(2.0)), rel=1e-14)
    p_pos, p_neg = matching_probabilities(batch)
    assert p_neg[0] == pytest.approx(1.0 / (1.0 + math.exp(-2.0)), rel=1e-14)
    assert p_pos[0] + p_neg[0] == pytest.approx(1.0, rel=1e-15)
    expected = 10.0 * p_neg[0] * np.array([-1.0, 1.0])
    for mode in (GRAD_MODE_EQ5, GRAD_MODE_EXACT):
        np.testing.assert_allclose(pixel_contrast_grad(batch, mode), expected, rtol=1e-12)


def _negative_at(dot: float) -> np.ndarray:
    """Unit vector whose dot product with the first basis vector is dot."""
    return np.array([dot, math.sqrt(max(0.0, 1.0 - dot * dot)), 0.0])


def test_harder_negatives_weigh_more():
    """Test loss and matching probability grow with the similarity of a negative."""
    anchor = np.array([1.0, 0.0, 0.0])
    positive = np.array([[0.0, 0.0, 1.0]])
    losses = []
    weights = []
    for dot in np.linspace(-1.0, 1.0, 41):
        batch = ContrastBatch(anchor, positive, _negative_at(dot)[None, :], temperature=0.1)
        losses.append(pixel_contrast(batch))
        weights.append(matching_probabilities(batch)[1][0])
        grad = pixel_contrast_grad(batch, GRAD_MODE_EQ5)
        # the negative enters the gradient weighted by its probability
        assert grad[0] == pytest.approx(10.0 * weights[-1] * dot, abs=1e-12)
    assert np.all(np.diff(losses) > 0)
    assert np.all(np.diff(weights) > 0)


def test_loss_rises_with_one_negative(rng: Rng):
    """Test moving one negative toward the anchor raises the loss of a mixed batch."""
    anchor = np.array([1.0, 0.0, 0.0])
    positives = _unit(rng, 3, 3)
    others = _unit(rng, 4, 3)
    losses = [
        pixel_contrast(
            ContrastBatch(anchor, positives, np.vstack([others, _negative_at(dot)]), 0.2)
        )
        for dot in np.linspace(-0.9, 0.9, 19)
    ]
    assert np.all(np.diff(losses) > 0)


def test_unknown_gradient_mode(rng: Rng):
    """Test an unknown mode raises ValueError."""
    with pytest.raises(ValueError):
        pixel_contrast_grad(_batch(rng, 1, 1), "adjoint")


def test_matching_probabilities_sum_to_one(rng: Rng):
    """Test pooled matching probabilities form a distribution."""
    p_pos, p_neg = matching_probabilities(_batch(rng, positives=3, negatives=4))
    assert p_pos.shape == (3,)
    assert p_neg.shape == (4,)
    assert p_pos.sum() + p_neg.sum() == pytest.approx(1.0)


def test_rows_match_single_anchor(rng: Rng):
    """Test the batched loss equals the per-anchor loss row by row."""
    pos = rng.normal(2.0, (3, 4))
    neg = rng.normal(2.0, (3, 5))
    rows = pixel_contrast_rows(pos, neg)
    for row in range(3):
        single = pixel_contrast_rows(pos[row][None, :], neg[row][None, :])[0]
        assert rows[row] == pytest.approx(single, rel=1e-14)


def test_cross_entropy_matches_oracle():
    """Test cross-entropy and its gradient."""
    logits = np.array([2.0, -1.0, 0.5])
    loss, grad = cross_entropy(logits, 2)
    with mpmath.workdps(MPMATH_DIGITS):
        total = mpmath.fsum(mpmath.exp(mpmath.mpf(v)) for v in logits)
        expected = float(-mpmath.log(mpmath.exp(mpmath.mpf(0.5)) / total))
    assert loss == pytest.approx(expected, rel=1e-14)
    assert grad.sum() == pytest.approx(0.0, abs=1e-15)
    assert grad[2] < 0


def test_cross_entropy_rejects_ignore():
    """Test IGNORE pixels have no cross-entropy."""
    with pytest.raises(IgnoredPixel):
        cross_entropy([0.0, 1.0], IGNORE_LABEL)


def test_cross_entropy_map_skips_ignore(rng: Rng):
    """Test the batched form drops IGNORE pixels and zeroes their gradient."""
    logits = rng.normal(1.0, (2, 3, 4))
    labels = np.array([[0, 1, IGNORE_LABEL], [3, IGNORE_LABEL, 2]], dtype=np.uint8)
    losses, grads, valid = cross_entropy_map(logits, labels)
    assert losses.shape == (4,)
    assert valid.sum() == 4
    np.testing.assert_array_equal(grads[~valid], 0.0)
    assert losses[0] == pytest.approx(cross_entropy(logits[0, 0], 0)[0])


def test_joint_loss():
    """Test the joint objective and its degenerate cases."""
    weights = LossWeights(0.5)
    assert joint_loss([1.0, 3.0], [2.0, 4.0], weights) == pytest.approx(2.0 + 0.5 * 3.0)
    assert joint_loss([1.0, 3.0], [], weights) == 2.0
    assert joint_loss([1.0, 3.0], [2.0], LossWeights(0.0)) == 2.0
    with pytest.raises(EmptyCeTerms):
        joint_loss([], [1.0], weights)
    with pytest.raises(ValueError):
        LossWeights(-1.0)
