"""Finite-difference checks of the analytic gradients.

Each case is a tiny network on a 4x4 image with a fixed set of anchors and
fixed memory candidates, so the joint loss is a smooth function of the
parameters away from ReLU kinks. Cases whose pre-activations sit too close to
a kink are redrawn.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
import time

import numpy as np
import numpy.typing as npt

from .const import (
    _LOGGER,
    GRAD_MODE_EQ5,
    GRAD_MODE_EXACT,
    GRADCHECK_KINK_MARGIN,
    GRADCHECK_STEP,
    GRADCHECK_TOLERANCE,
    IGNORE_LABEL,
)
from .core import Rng, Tensor, l2_normalize_rows, l2_normalize_rows_backward
from .exceptions import GradCheckError
from .losses import (
    LossWeights,
    contrast_grad,
    contrast_loss,
    cross_entropy_map,
    joint_loss,
    pixel_contrast_rows,
    pixel_contrast_score_grads,
)
from .model import PARAM_NAMES, Params, PixelNet

TINY_SIZE = 4
TINY_DIMS = {
    "feature_dim": 3,
    "hidden_dim": 4,
    "embed_dim": 4,
    "proj_dim": 4,
    "num_classes": 3,
}
NUM_POSITIVES = 3
NUM_NEGATIVES = 5
MAX_DRAWS = 100


@dataclass
class GradCheckCase:
    """A network, one labeled image and fixed contrast candidates."""

    net: PixelNet
    features: Tensor
    labels: npt.NDArray[np.uint8]
    anchor_pixels: npt.NDArray[np.int64]
    positives: Tensor
    negatives: Tensor
    temperature: float = 0.5
    lambda_: float = 1.0


@dataclass
class GradCheckResult:
    """Relative errors of one case."""

    seed: int
    per_parameter: dict[str, float] = field(default_factory=dict)
    normalization_error: float = 0.0
    anchor_error: float = 0.0
    eq5_deviation: float = 0.0

    @property
    def max_rel_error(self) -> float:
        """Return the worst error over parameters, normalization and anchors."""
        return max(
            [*self.per_parameter.values(), self.normalization_error, self.anchor_error]
        )


@dataclass
class GradCheckReport:
    """Results of a whole suite."""

    results: list[GradCheckResult]
    tolerance: float
    elapsed: float

    @property
    def max_rel_error(self) -> float:
        """Return the worst error over every case."""
        return max((r.max_rel_error for r in self.results), default=0.0)

    @property
    def passed(self) -> bool:
        """Return True when every case is within tolerance."""
        return self.max_rel_error < self.tolerance


def relative_error(analytic: npt.ArrayLike, numeric: npt.ArrayLike) -> float:
    """Norm-wise relative difference, 0 when both are zero."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n)) / scale


def numeric_gradient(
    function: Callable[[Tensor], float], point: npt.ArrayLike, step: float = GRADCHECK_STEP
) -> Tensor:
    """Central differences of a scalar function at every entry of point."""
    base = np.array(point, dtype=np.float64)
    grad = np.zeros_like(base)
    for index in np.ndindex(base.shape):
        original = base[index]
        base[index] = original + step
        upper = function(base)
        base[index] = original - step
        lower = function(base)
        base[index] = original
        grad[index] = (upper - lower) / (2.0 * step)
    return grad


def _unit_rows(rng: Rng, shape: tuple[int, ...]) -> Tensor:
    return l2_normalize_rows(rng.normal(1.0, shape))[0]


def make_case(seed: int) -> GradCheckCase:
    """Draw a kink-free case from a seed."""
    rng = Rng(seed)
    size = TINY_SIZE
    num_classes = TINY_DIMS["num_classes"]
    for _ in range(MAX_DRAWS):
        net = PixelNet.initialize(rng, **TINY_DIMS)
        features = rng.normal(1.0, (size, size, TINY_DIMS["feature_dim"]))
        labels = rng.integers(0, num_classes, (size, size)).astype(np.uint8)
        labels[0, 0] = IGNORE_LABEL
        cache = net.forward(features).cache
        margin = min(float(np.abs(cache["z1"]).min()), float(np.abs(cache["pz1"]).min()))
        if margin > GRADCHECK_KINK_MARGIN:
            break
    else:
        raise GradCheckError(f"No kink-free case found for seed {seed}")

    flat = labels.reshape(-1)
    anchors = [
        int(rng.choice(np.flatnonzero(flat == class_id), 1)[0])
        for class_id in np.unique(flat)
        if class_id != IGNORE_LABEL
    ]
    count = len(anchors)
    dim = TINY_DIMS["proj_dim"]
    return GradCheckCase(
        net=net,
        features=features,
        labels=labels,
        anchor_pixels=np.asarray(anchors, dtype=np.int64),
        positives=_unit_rows(rng, (count, NUM_POSITIVES, dim)),
        negatives=_unit_rows(rng, (count, NUM_NEGATIVES, dim)),
    )


def _scores(case: GradCheckCase, anchors: Tensor) -> tuple[Tensor, Tensor]:
    pos = np.einsum("ad,apd->ap", anchors, case.positives) / case.temperature
    neg = np.einsum("ad,and->an", anchors, case.negatives) / case.temperature
    return pos, neg


def objective(case: GradCheckCase, params: Params) -> float:
    """Joint loss of the case at the given parameters."""
    net = PixelNet(params, **TINY_DIMS)
    result = net.forward(case.features)
    ce_losses, _, _ = cross_entropy_map(result.logits, case.labels)
    anchors = result.projections.reshape(-1, net.proj_dim)[case.anchor_pixels]
    pos, neg = _scores(case, anchors)
    return joint_loss(ce_losses, pixel_contrast_rows(pos, neg), LossWeights(case.lambda_))


def analytic_gradients(case: GradCheckCase, mode: str = GRAD_MODE_EXACT) -> Params:
    """Backpropagated gradient of objective() at the case's parameters."""
    net = case.net
    result = net.forward(case.features)
    ce_losses, grad_logits, _ = cross_entropy_map(result.logits, case.labels)
    flat_proj = result.projections.reshape(-1, net.proj_dim)
    pos, neg = _scores(case, flat_proj[case.anchor_pixels])
    grad_pos, grad_neg = pixel_contrast_score_grads(pos, neg, mode)
    anchor_grads = (
        np.einsum("ap,apd->ad", grad_pos, case.positives)
        + np.einsum("an,and->ad", grad_neg, case.negatives)
    ) / case.temperature
    grad_proj = np.zeros_like(flat_proj)
    np.add.at(
        grad_proj, case.anchor_pixels, anchor_grads * (case.lambda_ / len(case.anchor_pixels))
    )
    return net.backward(
        result, grad_logits / ce_losses.size, grad_proj.reshape(result.projections.shape)
    )


def numeric_gradients(case: GradCheckCase, step: float = GRADCHECK_STEP) -> Params:
    """Central-difference gradient of objective() for every parameter."""
    grads: Params = {}
    for name in PARAM_NAMES:

        def along(value: Tensor, name: str = name) -> float:
            return objective(case, {**case.net.params, name: value})

        grads[name] = numeric_gradient(along, case.net.params[name], step)
    return grads


def check_normalization(rng: Rng, dim: int = 4, rows: int = 5) -> float:
    """Relative error of the l2 normalization Jacobian."""
    point = rng.normal(1.0, (rows, dim))
    upstream = rng.normal(1.0, (rows, dim))
    normalized, norms = l2_normalize_rows(point)
    analytic = l2_normalize_rows_backward(normalized, norms, upstream)
    numeric = numeric_gradient(
        lambda value: float(np.sum(upstream * l2_normalize_rows(value)[0])), point
    )
    return relative_error(analytic, numeric)


def check_anchor_gradient(case: GradCheckCase) -> float:
    """Worst relative error of the contrastive gradient at raw anchor vectors."""
    flat_proj = case.net.forward(case.features).projections.reshape(-1, case.net.proj_dim)
    worst = 0.0
    for row, pixel in enumerate(case.anchor_pixels):
        positives = case.positives[row]
        negatives = case.negatives[row]
        analytic = contrast_grad(flat_proj[pixel], positives, negatives, case.temperature)
        numeric = numeric_gradient(
            lambda value: contrast_loss(value, positives, negatives, case.temperature),
            flat_proj[pixel],
        )
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def check_case(seed: int) -> GradCheckResult:
    """Compare analytic and numeric gradients for one seed."""
    case = make_case(seed)
    analytic = analytic_gradients(case)
    numeric = numeric_gradients(case)
    eq5 = analytic_gradients(case, GRAD_MODE_EQ5)
    flat = np.concatenate([analytic[name].ravel() for name in PARAM_NAMES])
    flat_eq5 = np.concatenate([eq5[name].ravel() for name in PARAM_NAMES])
    return GradCheckResult(
        seed=seed,
        per_parameter={
            name: relative_error(analytic[name], numeric[name]) for name in PARAM_NAMES
        },
        normalization_error=check_normalization(Rng(seed).spawn(1)[0]),
        anchor_error=check_anchor_gradient(case),
        eq5_deviation=relative_error(flat_eq5, flat),
    )


def run_gradcheck(
    seeds: Sequence[int], tolerance: float = GRADCHECK_TOLERANCE
) -> GradCheckReport:
    """Run check_case for every seed."""
    start_time = time.time()
    results = []
    for seed in seeds:
        result = check_case(seed)
        _LOGGER.debug(
            f"Seed {seed}: max relative error {result.max_rel_error:.3e}, "
            f"eq5 deviation {result.eq5_deviation:.3e}"
        )
        results.append(result)
    report = GradCheckReport(results, tolerance, time.time() - start_time)
    _LOGGER.info(
        f"Checked gradients for {len(results)} seeds: max relative error "
        f"{report.max_rel_error:.3e} in {report.elapsed:.2f}s"
    )
    return report
