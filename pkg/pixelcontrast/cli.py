"""Command-line entry point for the pixelcontrast package."""

from __future__ import annotations

import argparse
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
import json
import logging
from pathlib import Path
import sys
import time

import colorlog

from . import data
from .config import TrainConfig, load_config, write_resolved_config
from .const import (
    _LOGGER,
    ABLATION_FILENAME,
    DEFAULT_ABLATION_SEEDS,
    DEFAULT_FEATURE_DIM,
    DEFAULT_GRADCHECK_SEEDS,
    DEFAULT_IMAGE_SIZE,
    DEFAULT_NOISE_SIGMA,
    DEFAULT_NUM_CLASSES,
    DEFAULT_NUM_IMAGES,
    DEFAULT_OFFSET_CYCLES,
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_VALIDATION,
    GRADCHECK_TOLERANCE,
    GRID_NAMES,
    LAYOUT_VORONOI,
    LAYOUTS,
    RESOLVED_CONFIG_FILENAME,
    SPLIT_TEST,
    SPLIT_TRAIN,
)
from .exceptions import UsageError, ValidationError
from .gradcheck import run_gradcheck
from .model import load_checkpoint
from .trainer import (
    ABLATION_GRIDS,
    ablate,
    dataset_for,
    evaluate,
    summarize_ablation,
    train,
    write_ablation_csv,
)

SUBCOMMAND_GEN_DATA = "gen-data"
SUBCOMMAND_TRAIN = "train"
SUBCOMMAND_EVAL = "eval"
SUBCOMMAND_ABLATE = "ablate"
SUBCOMMAND_CHECK_GRAD = "check-grad"

CONFIG_EPILOG = (
    "Configuration resolves in the order built-in defaults, then --config file, "
    "then each --override key=value in the order given. Unknown keys are an error."
)

LOG_FORMAT = "%(log_color)s%(asctime)s %(levelname)-8s%(reset)s %(name)s: %(message)s"


class _ArgumentParser(argparse.ArgumentParser):
    """Parser whose usage errors raise instead of exiting."""

    def error(self, message: str) -> None:  # type: ignore[override]
        """Raise UsageError with argparse's message."""
        raise UsageError(message)


@contextmanager
def _stderr_logging(verbose: bool) -> Iterator[None]:
    """Log the package to the current sys.stderr for the duration of one run.

    The handler is detached afterwards, so nothing writes to a stream the
    caller may have closed in the meantime.
    """
    handler = colorlog.StreamHandler(sys.stderr)
    handler.setFormatter(colorlog.ColoredFormatter(LOG_FORMAT))
    _LOGGER.addHandler(handler)
    _LOGGER.setLevel(logging.DEBUG if verbose else logging.INFO)
    try:
        yield
    finally:
        _LOGGER.removeHandler(handler)


def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key = value configuration file")
    parser.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one configuration key (repeatable)",
    )


def _gen_data(args: argparse.Namespace) -> int:
    """Generate a synthetic dataset and write it to --out."""
    spec = data.SynthSpec(
        num_images=args.num_images,
        height=args.size,
        width=args.size,
        num_classes=args.classes,
        feature_dim=args.feature_dim,
        noise_sigma=args.noise,
        layout=args.layout,
        seed=args.seed,
        ignore_border=args.ignore_border,
        modes_per_class=args.modes_per_class,
        offset_cycles=args.offset_cycles,
    )
    manifest = data.save(data.generate(spec), args.out)
    print(manifest)
    return EXIT_OK


def _train(args: argparse.Namespace) -> int:
    """Train one configuration and write its run directory."""
    config = load_config(args.config, args.override)
    report = train(dataset_for(config), config, args.out)
    print(f"final mIoU: {report.final_miou:.4f}")
    return EXIT_OK


def _eval(args: argparse.Namespace) -> int:
    """Re-evaluate a saved network."""
    config = load_config(args.config, args.override)
    net = load_checkpoint(args.checkpoint)
    result = evaluate(
        net, dataset_for(config), args.split, max_pairs=config.embedding_max_pairs
    )
    summary = {
        "split": result.split,
        "miou": result.miou,
        "per_class_iou": [float(v) for v in result.per_class_iou],
        "pixel_accuracy": result.pixel_accuracy,
        "mean_class_accuracy": result.mean_class_accuracy,
        "intra": result.structure.intra,
        "inter": result.structure.inter,
    }
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _ablate(args: argparse.Namespace) -> int:
    """Run the requested ablation grids and write ablation.csv."""
    config: TrainConfig = load_config(args.config, args.override)
    cells = [cell for grid in args.grid for cell in ABLATION_GRIDS[grid]]
    results = ablate(
        dataset_for(config),
        config,
        cells,
        seeds=range(args.seeds),
        jobs=args.jobs,
        progress=not args.quiet,
    )
    output_dir = Path(args.out)
    output_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(config, output_dir / RESOLVED_CONFIG_FILENAME)
    write_ablation_csv(output_dir / ABLATION_FILENAME, results)
    for row in summarize_ablation(results):
        print(f"{row.grid:<10} {row.cell:<24} mIoU {row.final_miou:.4f}")
    return EXIT_OK


def _check_grad(args: argparse.Namespace) -> int:
    """Compare analytic and finite-difference gradients."""
    report = run_gradcheck(range(args.seeds), args.tolerance)
    print(f"max relative error: {report.max_rel_error:.3e}")
    if not report.passed:
        _LOGGER.error(
            f"Gradient check exceeded tolerance {args.tolerance:g} "
            f"({report.max_rel_error:.3e})"
        )
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS: dict[str, tuple[Callable[[argparse.Namespace], int], str]] = {
    SUBCOMMAND_GEN_DATA: (_gen_data, "generate a synthetic segmentation dataset"),
    SUBCOMMAND_TRAIN: (_train, "train with the joint objective"),
    SUBCOMMAND_EVAL: (_eval, "evaluate a saved network"),
    SUBCOMMAND_ABLATE: (_ablate, "run ablation grids"),
    SUBCOMMAND_CHECK_GRAD: (_check_grad, "finite-difference gradient check"),
}


def build_parser() -> argparse.ArgumentParser:
    """Build the argument parser with one subparser per command."""
    parser = _ArgumentParser(prog="pixelcontrast", description=__doc__, epilog=CONFIG_EPILOG)
    parser.add_argument("-v", "--verbose", action="store_true", help="log at debug level")
    subparsers = parser.add_subparsers(dest="command", required=True)
    parsers = {
        name: subparsers.add_parser(name, help=summary, epilog=CONFIG_EPILOG)
        for name, (_, summary) in COMMANDS.items()
    }
    for name, (handler, _) in COMMANDS.items():
        parsers[name].set_defaults(handler=handler)

    gen = parsers[SUBCOMMAND_GEN_DATA]
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--num-images", type=int, default=DEFAULT_NUM_IMAGES)
    gen.add_argument("--classes", type=int, default=DEFAULT_NUM_CLASSES)
    gen.add_argument("--size", type=int, default=DEFAULT_IMAGE_SIZE)
    gen.add_argument("--feature-dim", type=int, default=DEFAULT_FEATURE_DIM)
    gen.add_argument("--noise", type=float, default=DEFAULT_NOISE_SIGMA)
    gen.add_argument("--layout", choices=LAYOUTS, default=LAYOUT_VORONOI)
    gen.add_argument("--ignore-border", type=int, default=0)
    gen.add_argument("--modes-per-class", type=int, default=1, help="prototypes per class")
    gen.add_argument("--offset-cycles", type=float, default=DEFAULT_OFFSET_CYCLES)
    gen.add_argument("--out", type=Path, required=True, help="dataset directory")

    train_parser = parsers[SUBCOMMAND_TRAIN]
    _add_config_arguments(train_parser)
    train_parser.add_argument("--out", type=Path, required=True, help="run directory")

    eval_parser = parsers[SUBCOMMAND_EVAL]
    _add_config_arguments(eval_parser)
    eval_parser.add_argument("--checkpoint", type=Path, required=True)
    eval_parser.add_argument("--split", choices=(SPLIT_TRAIN, SPLIT_TEST), default=SPLIT_TEST)

    ablate_parser = parsers[SUBCOMMAND_ABLATE]
    _add_config_arguments(ablate_parser)
    ablate_parser.add_argument(
        "--grid", choices=GRID_NAMES, nargs="+", required=True, help="grids to run"
    )
    ablate_parser.add_argument("--seeds", type=int, default=DEFAULT_ABLATION_SEEDS)
    ablate_parser.add_argument("--jobs", type=int, default=1)
    ablate_parser.add_argument("--quiet", action="store_true", help="hide the progress bar")
    ablate_parser.add_argument("--out", type=Path, required=True, help="output directory")

    check = parsers[SUBCOMMAND_CHECK_GRAD]
    check.add_argument("--seeds", type=int, default=DEFAULT_GRADCHECK_SEEDS)
    check.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    """Run a command and return its exit code.

    0 on success, 1 when input fails validation, 2 on any other failure.
    """
    start_time = time.time()
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as err:
        print(f"pixelcontrast: error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as err:
        # --help and --version exit through argparse
        return int(err.code or EXIT_OK)
    with _stderr_logging(args.verbose):
        try:
            code = args.handler(args)
        except ValidationError as err:
            print(f"pixelcontrast: error: {err}", file=sys.stderr)
            return EXIT_VALIDATION
        except Exception as err:  # noqa: BLE001
            elapsed = time.time() - start_time
            _LOGGER.error(f"{args.command} failed after {elapsed:.2f}s: {err}")
            print(f"pixelcontrast: error: {err}", file=sys.stderr)
            return EXIT_RUNTIME
        _LOGGER.debug(f"{args.command} finished in {time.time() - start_time:.2f}s")
    return code


def main() -> None:
    """Console script entry point."""
    sys.exit(run())
