"""Per-pixel toy network, its reverse pass and the SGD optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import TypeAlias

import numpy as np
import numpy.typing as npt

from .const import (
    _LOGGER,
    DEFAULT_EMBED_DIM,
    DEFAULT_FEATURE_DIM,
    DEFAULT_HIDDEN_DIM,
    DEFAULT_LR_POWER,
    DEFAULT_MOMENTUM,
    DEFAULT_NUM_CLASSES,
    DEFAULT_PROJ_DIM,
    DEFAULT_WEIGHT_DECAY,
)
from .core import Rng, Tensor, l2_normalize_rows, l2_normalize_rows_backward
from .exceptions import CorruptFile, ScheduleExhausted, ShapeMismatch

PARAM_NAMES = (
    "embed_w1",
    "embed_b1",
    "embed_w2",
    "embed_b2",
    "seg_w",
    "seg_b",
    "proj_w1",
    "proj_b1",
    "proj_w2",
    "proj_b2",
)
PROJ_PARAM_NAMES = ("proj_w1", "proj_b1", "proj_w2", "proj_b2")

CHECKPOINT_MAGIC = b"PXCN"
_HEADER_DTYPE = np.dtype("<u4")
_VALUE_DTYPE = np.dtype("<f8")

Params: TypeAlias = dict[str, Tensor]


@dataclass
class ForwardResult:
    """Network outputs plus the intermediates the reverse pass needs."""

    embeddings: Tensor
    logits: Tensor
    projections: Tensor
    cache: dict[str, Tensor] = field(repr=False)
    grid_shape: tuple[int, ...]


def _relu(values: Tensor) -> Tensor:
    return np.maximum(values, 0.0)


class PixelNet:
    """Embedder with segmentation and projection heads, all per-pixel.

    A 1x1 convolution is a linear map shared by every pixel, so each layer
    here is a matrix applied to the last axis.
    """

    def __init__(
        self,
        params: Params,
        feature_dim: int = DEFAULT_FEATURE_DIM,
        hidden_dim: int = DEFAULT_HIDDEN_DIM,
        embed_dim: int = DEFAULT_EMBED_DIM,
        proj_dim: int = DEFAULT_PROJ_DIM,
        num_classes: int = DEFAULT_NUM_CLASSES,
    ) -> None:
        """Initialize the network from a parameter dictionary."""
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.proj_dim = proj_dim
        self.num_classes = num_classes
        expected = self.param_shapes()
        if set(params) != set(expected):
            raise ShapeMismatch(f"Expected parameters {sorted(expected)}, got {sorted(params)}")
        for name, shape in expected.items():
            if np.shape(params[name]) != shape:
                raise ShapeMismatch(
                    f"Parameter {name} has shape {np.shape(params[name])}, expected {shape}"
                )
        self.params: Params = {
            name: np.array(params[name], dtype=np.float64) for name in PARAM_NAMES
        }

    @classmethod
    def initialize(
        cls,
        rng: Rng,
        feature_dim: int = DEFAULT_FEATURE_DIM,
        hidden_dim: int = DEFAULT_HIDDEN_DIM,
        embed_dim: int = DEFAULT_EMBED_DIM,
        proj_dim: int = DEFAULT_PROJ_DIM,
        num_classes: int = DEFAULT_NUM_CLASSES,
    ) -> PixelNet:
        """Create a network with weights uniform in +-1/sqrt(fan_in)."""
        shapes = _param_shapes(feature_dim, hidden_dim, embed_dim, proj_dim, num_classes)
        params: Params = {}
        for name in PARAM_NAMES:
            fan_in = shapes[name.replace("_b", "_w")][0]
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, shapes[name])
        return cls(params, feature_dim, hidden_dim, embed_dim, proj_dim, num_classes)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Return the shape of every parameter."""
        return _param_shapes(
            self.feature_dim, self.hidden_dim, self.embed_dim, self.proj_dim, self.num_classes
        )

    @property
    def num_parameters(self) -> int:
        """Return the total number of scalar parameters."""
        return sum(int(np.prod(shape)) for shape in self.param_shapes().values())

    def forward(self, features: npt.ArrayLike) -> ForwardResult:
        """Run all three heads on an ... x F feature grid."""
        x_grid = np.asarray(features, dtype=np.float64)
        if x_grid.shape[-1] != self.feature_dim:
            raise ShapeMismatch(
                f"Features have dimension {x_grid.shape[-1]}, network expects {self.feature_dim}"
            )
        grid_shape = x_grid.shape[:-1]
        p = self.params
        x = x_grid.reshape(-1, self.feature_dim)
        z1 = x @ p["embed_w1"] + p["embed_b1"]
        h1 = _relu(z1)
        emb = h1 @ p["embed_w2"] + p["embed_b2"]
        logits = emb @ p["seg_w"] + p["seg_b"]
        pz1 = emb @ p["proj_w1"] + p["proj_b1"]
        ph1 = _relu(pz1)
        u = ph1 @ p["proj_w2"] + p["proj_b2"]
        proj, norms = l2_normalize_rows(u)
        cache = {
            "x": x,
            "z1": z1,
            "h1": h1,
            "emb": emb,
            "pz1": pz1,
            "ph1": ph1,
            "proj": proj,
            "norms": norms,
        }
        return ForwardResult(
            embeddings=emb.reshape(*grid_shape, self.embed_dim),
            logits=logits.reshape(*grid_shape, self.num_classes),
            projections=proj.reshape(*grid_shape, self.proj_dim),
            cache=cache,
            grid_shape=grid_shape,
        )

    def backward(
        self,
        result: ForwardResult,
        grad_logits: npt.ArrayLike,
        grad_projections: npt.ArrayLike | None = None,
    ) -> Params:
        """Chain upstream gradients back to every parameter.

        The cross-entropy path runs through the segmentation head, the
        contrastive path through the projection head and its normalization;
        both meet in the shared embedder.
        """
        p = self.params
        c = result.cache
        d_logits = np.asarray(grad_logits, dtype=np.float64)
        if d_logits.shape != (*result.grid_shape, self.num_classes):
            raise ShapeMismatch(f"Logit gradient has shape {d_logits.shape}")
        d_logits = d_logits.reshape(-1, self.num_classes)
        grads: Params = {}

        grads["seg_w"] = c["emb"].T @ d_logits
        grads["seg_b"] = d_logits.sum(axis=0)
        d_emb = d_logits @ p["seg_w"].T

        if grad_projections is None:
            for name in PROJ_PARAM_NAMES:
                grads[name] = np.zeros_like(p[name])
        else:
            d_proj = np.asarray(grad_projections, dtype=np.float64)
            if d_proj.shape != (*result.grid_shape, self.proj_dim):
                raise ShapeMismatch(f"Projection gradient has shape {d_proj.shape}")
            d_proj = d_proj.reshape(-1, self.proj_dim)
            d_u = l2_normalize_rows_backward(c["proj"], c["norms"], d_proj)
            grads["proj_w2"] = c["ph1"].T @ d_u
            grads["proj_b2"] = d_u.sum(axis=0)
            d_pz1 = (d_u @ p["proj_w2"].T) * (c["pz1"] > 0)
            grads["proj_w1"] = c["emb"].T @ d_pz1
            grads["proj_b1"] = d_pz1.sum(axis=0)
            d_emb = d_emb + d_pz1 @ p["proj_w1"].T

        grads["embed_w2"] = c["h1"].T @ d_emb
        grads["embed_b2"] = d_emb.sum(axis=0)
        d_z1 = (d_emb @ p["embed_w2"].T) * (c["z1"] > 0)
        grads["embed_w1"] = c["x"].T @ d_z1
        grads["embed_b1"] = d_z1.sum(axis=0)
        return {name: grads[name] for name in PARAM_NAMES}

    def predict(self, features: npt.ArrayLike) -> npt.NDArray[np.int64]:
        """Return the argmax class of every pixel."""
        return np.argmax(self.forward(features).logits, axis=-1)


def _param_shapes(
    feature_dim: int, hidden_dim: int, embed_dim: int, proj_dim: int, num_classes: int
) -> dict[str, tuple[int, ...]]:
    return {
        "embed_w1": (feature_dim, hidden_dim),
        "embed_b1": (hidden_dim,),
        "embed_w2": (hidden_dim, embed_dim),
        "embed_b2": (embed_dim,),
        "seg_w": (embed_dim, num_classes),
        "seg_b": (num_classes,),
        "proj_w1": (embed_dim, proj_dim),
        "proj_b1": (proj_dim,),
        "proj_w2": (proj_dim, proj_dim),
        "proj_b2": (proj_dim,),
    }


@dataclass
class OptimizerState:
    """SGD with momentum and weight decay under polynomial decay."""

    base_lr: float
    total_iter: int
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    power: float = DEFAULT_LR_POWER
    iter: int = 0
    velocity: Params = field(default_factory=dict)

    def lr_at(self, iteration: int) -> float:
        """Return base_lr * (1 - iteration / total_iter) ** power."""
        progress = min(max(iteration / self.total_iter, 0.0), 1.0)
        return self.base_lr * (1.0 - progress) ** self.power

    @property
    def lr(self) -> float:
        """Return the rate for the current iteration."""
        return self.lr_at(self.iter)


def sgd_step(state: OptimizerState, params: Params, grads: Params) -> Params:
    """Apply one momentum step and advance the schedule.

    v <- momentum * v + grad + weight_decay * param; param <- param - lr * v.
    """
    if state.iter >= state.total_iter:
        raise ScheduleExhausted(
            f"Optimizer already took {state.iter} of {state.total_iter} steps"
        )
    lr = state.lr
    updated: Params = {}
    for name, value in params.items():
        velocity = state.velocity.get(name)
        if velocity is None:
            velocity = np.zeros_like(value)
        velocity = state.momentum * velocity + grads[name] + state.weight_decay * value
        state.velocity[name] = velocity
        updated[name] = value - lr * velocity
    state.iter += 1
    return updated


def save_checkpoint(net: PixelNet, path: str | Path) -> None:
    """Write parameters as a flat little-endian dump.

    Layout: magic "PXCN", tensor count (u32), then per tensor its ndim and
    dims (u32), then every tensor's f64 values in parameter order.
    """
    header = [CHECKPOINT_MAGIC, np.array([len(PARAM_NAMES)], dtype=_HEADER_DTYPE).tobytes()]
    for name in PARAM_NAMES:
        shape = net.params[name].shape
        header.append(np.array([len(shape), *shape], dtype=_HEADER_DTYPE).tobytes())
    values = [net.params[name].astype(_VALUE_DTYPE).tobytes() for name in PARAM_NAMES]
    Path(path).write_bytes(b"".join(header + values))
    _LOGGER.info(f"Wrote {net.num_parameters} parameters to {path}")


def load_checkpoint(path: str | Path) -> PixelNet:
    """Read a network written by save_checkpoint."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CorruptFile(f"{path} is not a network checkpoint")
    offset = 4

    def take(dtype: np.dtype, count: int) -> npt.NDArray:
        nonlocal offset
        size = dtype.itemsize * count
        if offset + size > len(raw):
            raise CorruptFile(f"Checkpoint {path} is truncated")
        values = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
        offset += size
        return values

    (count,) = take(_HEADER_DTYPE, 1)
    if count != len(PARAM_NAMES):
        raise CorruptFile(f"Checkpoint {path} holds {count} tensors, expected {len(PARAM_NAMES)}")
    shapes = []
    for _ in PARAM_NAMES:
        (ndim,) = take(_HEADER_DTYPE, 1)
        shapes.append(tuple(int(v) for v in take(_HEADER_DTYPE, int(ndim))))
    params = {
        name: take(_VALUE_DTYPE, int(np.prod(shape))).reshape(shape).copy()
        for name, shape in zip(PARAM_NAMES, shapes, strict=True)
    }
    if offset != len(raw):
        raise CorruptFile(f"Checkpoint {path} has {len(raw) - offset} trailing bytes")
    feature_dim, hidden_dim = shapes[0]
    embed_dim = shapes[2][1]
    num_classes = shapes[4][1]
    proj_dim = shapes[6][1]
    try:
        return PixelNet(params, feature_dim, hidden_dim, embed_dim, proj_dim, num_classes)
    except ShapeMismatch as err:
        raise CorruptFile(f"Checkpoint {path} has inconsistent shapes") from err
