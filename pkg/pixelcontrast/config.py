"""Training configuration: defaults, cfg files and command-line overrides.

Files are line oriented `key = value` with `#` comments and dotted keys for
nested settings (`sampling.strategy = semi_hard`). Values resolve in the order
defaults, then file, then overrides; unknown keys are rejected.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import voluptuous as vol

from .const import (
    _LOGGER,
    ABLATION_INTER_IMAGE,
    ABLATIONS,
    ANCHOR_MODES,
    DEFAULT_BASE_LR,
    DEFAULT_BATCH_SIZE,
    DEFAULT_EMBED_DIM,
    DEFAULT_EMBEDDING_MAX_PAIRS,
    DEFAULT_EVAL_INTERVAL,
    DEFAULT_HIDDEN_DIM,
    DEFAULT_LAMBDA,
    DEFAULT_LR_POWER,
    DEFAULT_MOMENTUM,
    DEFAULT_PIXELS_PER_CLASS,
    DEFAULT_PROJ_DIM,
    DEFAULT_TEMPERATURE,
    DEFAULT_TOTAL_ITER,
    DEFAULT_WEIGHT_DECAY,
    GRAD_MODE_EXACT,
    GRAD_MODES,
    LAYOUTS,
    MEMORY_BOTH,
    MEMORY_MODES,
    QUEUE_SIZE_PER_IMAGE,
    STRATEGIES,
)
from .data import SynthSpec
from .exceptions import InvalidConfig, InvalidSpec
from .sampling import SamplingConfig

_DEFAULT_SAMPLING = SamplingConfig()
_DEFAULT_SYNTH = SynthSpec()


def _positive_int(value: Any) -> int:
    return vol.All(vol.Coerce(int), vol.Range(min=1))(value)


def _nonnegative_int(value: Any) -> int:
    return vol.All(vol.Coerce(int), vol.Range(min=0))(value)


def _positive_float(value: Any) -> float:
    return vol.All(vol.Coerce(float), vol.Range(min=0, min_included=False))(value)


def _nonnegative_float(value: Any) -> float:
    return vol.All(vol.Coerce(float), vol.Range(min=0))(value)


CONFIG_SCHEMA = vol.Schema(
    {
        vol.Required("tau"): _positive_float,
        vol.Required("lambda"): _nonnegative_float,
        vol.Required("pixels_per_class"): _positive_int,
        # 0 selects 10 x the number of training images
        vol.Required("queue_size"): _nonnegative_int,
        vol.Required("batch_size"): _positive_int,
        vol.Required("total_iter"): _positive_int,
        vol.Required("base_lr"): _positive_float,
        vol.Required("momentum"): vol.All(
            vol.Coerce(float), vol.Range(min=0, max=1, max_included=False)
        ),
        vol.Required("weight_decay"): _nonnegative_float,
        vol.Required("lr_power"): _positive_float,
        vol.Required("seed"): _nonnegative_int,
        vol.Required("grad_mode"): vol.In(GRAD_MODES),
        vol.Required("ablation"): vol.In(ABLATIONS),
        vol.Required("memory_mode"): vol.In(MEMORY_MODES),
        vol.Required("eval_interval"): _positive_int,
        vol.Required("embedding_max_pairs"): _positive_int,
        vol.Required("sampling.strategy"): vol.In(STRATEGIES),
        vol.Required("sampling.k_pos"): _positive_int,
        vol.Required("sampling.k_neg"): _positive_int,
        vol.Required("sampling.anchors_per_class"): _positive_int,
        vol.Required("sampling.semi_hard_fraction"): vol.All(
            vol.Coerce(float), vol.Range(min=0, max=1, min_included=False)
        ),
        vol.Required("sampling.anchor_mode"): vol.In(ANCHOR_MODES),
        vol.Required("model.hidden_dim"): _positive_int,
        vol.Required("model.embed_dim"): _positive_int,
        vol.Required("model.proj_dim"): _positive_int,
        vol.Required("data.path"): str,
        vol.Required("data.seed"): _nonnegative_int,
        vol.Required("data.num_images"): _positive_int,
        vol.Required("data.classes"): vol.All(vol.Coerce(int), vol.Range(min=1, max=254)),
        vol.Required("data.size"): _positive_int,
        vol.Required("data.feature_dim"): _positive_int,
        vol.Required("data.noise"): _nonnegative_float,
        vol.Required("data.layout"): vol.In(LAYOUTS),
        vol.Required("data.ignore_border"): _nonnegative_int,
        vol.Required("data.offset_amplitude"): _nonnegative_float,
        vol.Required("data.offset_cycles"): _nonnegative_float,
        vol.Required("data.modes_per_class"): _positive_int,
    }
)


@dataclass(frozen=True)
class TrainConfig:
    """Every hyper-parameter of a training run."""

    tau: float = DEFAULT_TEMPERATURE
    lambda_: float = DEFAULT_LAMBDA
    pixels_per_class: int = DEFAULT_PIXELS_PER_CLASS
    queue_size: int = 0
    batch_size: int = DEFAULT_BATCH_SIZE
    total_iter: int = DEFAULT_TOTAL_ITER
    base_lr: float = DEFAULT_BASE_LR
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    lr_power: float = DEFAULT_LR_POWER
    seed: int = 0
    grad_mode: str = GRAD_MODE_EXACT
    ablation: str = ABLATION_INTER_IMAGE
    memory_mode: str = MEMORY_BOTH
    eval_interval: int = DEFAULT_EVAL_INTERVAL
    embedding_max_pairs: int = DEFAULT_EMBEDDING_MAX_PAIRS
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    hidden_dim: int = DEFAULT_HIDDEN_DIM
    embed_dim: int = DEFAULT_EMBED_DIM
    proj_dim: int = DEFAULT_PROJ_DIM
    data_path: str = ""
    synth: SynthSpec = field(default_factory=SynthSpec)

    def queue_capacity(self, num_train_images: int) -> int:
        """Return T, defaulting to 10 x the number of training images."""
        if self.queue_size:
            return self.queue_size
        return QUEUE_SIZE_PER_IMAGE * max(num_train_images, 1)

    def to_mapping(self) -> dict[str, str]:
        """Return the flat key = value form, values as cfg-file strings."""
        values: dict[str, Any] = {
            "tau": self.tau,
            "lambda": self.lambda_,
            "pixels_per_class": self.pixels_per_class,
            "queue_size": self.queue_size,
            "batch_size": self.batch_size,
            "total_iter": self.total_iter,
            "base_lr": self.base_lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "lr_power": self.lr_power,
            "seed": self.seed,
            "grad_mode": self.grad_mode,
            "ablation": self.ablation,
            "memory_mode": self.memory_mode,
            "eval_interval": self.eval_interval,
            "embedding_max_pairs": self.embedding_max_pairs,
            "sampling.strategy": self.sampling.strategy,
            "sampling.k_pos": self.sampling.k_pos,
            "sampling.k_neg": self.sampling.k_neg,
            "sampling.anchors_per_class": self.sampling.anchors_per_class,
            "sampling.semi_hard_fraction": self.sampling.semi_hard_fraction,
            "sampling.anchor_mode": self.sampling.anchor_mode,
            "model.hidden_dim": self.hidden_dim,
            "model.embed_dim": self.embed_dim,
            "model.proj_dim": self.proj_dim,
            "data.path": self.data_path,
            "data.seed": self.synth.seed,
            "data.num_images": self.synth.num_images,
            "data.classes": self.synth.num_classes,
            "data.size": self.synth.height,
            "data.feature_dim": self.synth.feature_dim,
            "data.noise": self.synth.noise_sigma,
            "data.layout": self.synth.layout,
            "data.ignore_border": self.synth.ignore_border,
            "data.offset_amplitude": self.synth.offset_amplitude,
            "data.offset_cycles": self.synth.offset_cycles,
            "data.modes_per_class": self.synth.modes_per_class,
        }
        return {key: _format_value(value) for key, value in values.items()}

    def with_overrides(self, overrides: Mapping[str, Any]) -> TrainConfig:
        """Return a copy with some keys replaced."""
        return resolve_config(self.to_mapping(), overrides)


DEFAULT_CONFIG = TrainConfig()


def _format_value(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _from_validated(values: Mapping[str, Any]) -> TrainConfig:
    sampling = SamplingConfig(
        strategy=values["sampling.strategy"],
        k_pos=values["sampling.k_pos"],
        k_neg=values["sampling.k_neg"],
        anchors_per_class=values["sampling.anchors_per_class"],
        semi_hard_fraction=values["sampling.semi_hard_fraction"],
        anchor_mode=values["sampling.anchor_mode"],
    )
    synth = replace(
        _DEFAULT_SYNTH,
        num_images=values["data.num_images"],
        height=values["data.size"],
        width=values["data.size"],
        num_classes=values["data.classes"],
        feature_dim=values["data.feature_dim"],
        noise_sigma=values["data.noise"],
        layout=values["data.layout"],
        seed=values["data.seed"],
        ignore_border=values["data.ignore_border"],
        offset_amplitude=values["data.offset_amplitude"],
        offset_cycles=values["data.offset_cycles"],
        modes_per_class=values["data.modes_per_class"],
    )
    return TrainConfig(
        tau=values["tau"],
        lambda_=values["lambda"],
        pixels_per_class=values["pixels_per_class"],
        queue_size=values["queue_size"],
        batch_size=values["batch_size"],
        total_iter=values["total_iter"],
        base_lr=values["base_lr"],
        momentum=values["momentum"],
        weight_decay=values["weight_decay"],
        lr_power=values["lr_power"],
        seed=values["seed"],
        grad_mode=values["grad_mode"],
        ablation=values["ablation"],
        memory_mode=values["memory_mode"],
        eval_interval=values["eval_interval"],
        embedding_max_pairs=values["embedding_max_pairs"],
        sampling=sampling,
        hidden_dim=values["model.hidden_dim"],
        embed_dim=values["model.embed_dim"],
        proj_dim=values["model.proj_dim"],
        data_path=values["data.path"],
        synth=synth,
    )


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse `key = value` lines, rejecting malformed and repeated keys."""
    values: dict[str, str] = {}
    for number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise InvalidConfig(f"{source}:{number}: expected 'key = value', got {raw_line!r}")
        if key in values:
            raise InvalidConfig(f"{source}:{number}: key {key!r} set twice")
        values[key] = value.strip()
    return values


def parse_overrides(overrides: Iterable[str]) -> dict[str, str]:
    """Parse `key=value` command-line overrides."""
    values: dict[str, str] = {}
    for override in overrides:
        key, sep, value = override.partition("=")
        if not sep or not key.strip():
            raise InvalidConfig(f"Override {override!r} is not of the form key=value")
        values[key.strip()] = value.strip()
    return values


def resolve_config(
    file_values: Mapping[str, Any] | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> TrainConfig:
    """Merge defaults, file values and overrides and validate the result."""
    merged: dict[str, Any] = dict(DEFAULT_CONFIG.to_mapping())
    merged.update(file_values or {})
    merged.update(overrides or {})
    try:
        config = _from_validated(CONFIG_SCHEMA(merged))
        config.synth.validate()
        return config
    except vol.Invalid as err:
        raise InvalidConfig(f"Invalid configuration: {err}") from err
    except (ValueError, InvalidSpec) as err:
        raise InvalidConfig(f"Invalid configuration: {err}") from err


def load_config(
    path: str | Path | None = None, overrides: Iterable[str] = ()
) -> TrainConfig:
    """Read a cfg file (optional) and apply command-line overrides."""
    overrides = list(overrides)
    file_values: dict[str, str] = {}
    if path is not None:
        config_path = Path(path)
        if not config_path.is_file():
            raise InvalidConfig(f"Config file {config_path} does not exist")
        file_values = parse_config_text(config_path.read_text(), str(config_path))
    config = resolve_config(file_values, parse_overrides(overrides))
    _LOGGER.debug(
        f"Resolved config from {path or 'defaults'} with {len(overrides)} override(s)"
    )
    return config


def format_config(config: TrainConfig) -> str:
    """Render the fully resolved config as cfg-file text."""
    lines = ["# Fully resolved configuration (defaults < file < overrides)"]
    lines.extend(f"{key} = {value}" for key, value in config.to_mapping().items())
    return "\n".join(lines) + "\n"


def write_resolved_config(config: TrainConfig, path: str | Path) -> None:
    """Write the resolved config so the run can be repeated from it."""
    Path(path).write_text(format_config(config))
