import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

# -----------------------------------------------------
# Make project imports work no matter where app runs
# -----------------------------------------------------
CURRENT_FILE = Path(__file__).resolve()
SRC_PATH = CURRENT_FILE.parents[1]

if str(SRC_PATH) not in sys.path:
    sys.path.insert(0, str(SRC_PATH))

# -----------------------------------------------------
#  Import project modules
# -----------------------------------------------------
import pandas as pd

from path_rwkv.core.experiments import AblationData, bench_scaling, run_ablation
from path_rwkv.core.model import build_model, load_model
from path_rwkv.core.numerics import set_precision
from path_rwkv.core.trainer import (
    TrainConfig, evaluate, model_config_from_run_config, predict_slide, train,
)
from path_rwkv.core.verify import raise_on_failure, results_frame, run_verification
from path_rwkv.data.bag_format import read_bag
from path_rwkv.data.dataset import DatasetSpec, SlideDataset, generate_dataset
from path_rwkv.data.synthetic import task_specs
from path_rwkv.utils.config_loader import RunConfig, build_run_config
from path_rwkv.utils.errors import ConfigError, FormatError, PathRwkvError
from path_rwkv.utils.general import Stopwatch, append_summary, derive_seed
from path_rwkv.utils.logging_setup import setup_logging

logger = logging.getLogger("path_rwkv.app")

COMMANDS = ("gen", "train", "infer", "verify", "ablate", "bench")


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with code 1."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="path-rwkv", description="PathRWKV slide-level multi-task modelling")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="YAML run configuration file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--mode", choices=("recurrent", "sampled"))
    parser.add_argument("--bag-size", dest="bag_size", type=int)
    parser.add_argument("--max-n-tiles", dest="max_n_tiles", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--precision", choices=("float32", "float64"))
    parser.add_argument("--force", action="store_true", default=None)
    parser.add_argument("--data-dir", dest="data_dir")
    parser.add_argument("--out-dir", dest="out_dir")
    parser.add_argument("--n-slides", dest="n_slides", type=int)
    parser.add_argument("--checkpoint")
    parser.add_argument("--slide", help="Bag file for infer")
    parser.add_argument("--level", choices=("fast", "full"))
    parser.add_argument("--axis")
    parser.add_argument("--grid", help="Comma separated ablation values")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override any config key")
    return parser


def resolve_config(args: argparse.Namespace, environ: Optional[Dict[str, str]] = None) -> RunConfig:
    flags = {
        key: getattr(args, key)
        for key in ("seed", "mode", "bag_size", "max_n_tiles", "epochs", "workers", "precision", "force",
                    "data_dir", "out_dir", "n_slides", "checkpoint", "slide", "level", "axis", "grid")
    }
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        flags[key.strip()] = value.strip()
    return build_run_config(args.config, flags, environ)


def _write_table(frame: pd.DataFrame, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, sep="\t", index=False)
    logger.info(f"Wrote {path}")


def _summary(config: RunConfig, command: str, seconds: float, **extra: Any) -> None:
    record = {"command": command, "config_hash": config.config_hash(), "seed": config.seed,
              "seconds": round(seconds, 3), **extra}
    append_summary(str(Path(config.out_dir) / "summary.jsonl"), record)


# -----------------------------------------------------
#  Commands
# -----------------------------------------------------
def cmd_gen(config: RunConfig) -> None:
    with Stopwatch() as sw:
        dataset = generate_dataset(config.data_dir, DatasetSpec.from_run_config(config),
                                   workers=config.workers, force=config.force)
    print(f"{len(dataset)} slides, {dataset.total_tiles()} tiles in {config.data_dir}")
    print(dataset.label_summary().to_string(index=False))
    print(f"manifest hash {dataset.manifest_hash()}")
    _summary(config, "gen", sw.seconds, n_slides=len(dataset), manifest_hash=dataset.manifest_hash())


def _splits(config: RunConfig):
    dataset = SlideDataset.load(config.data_dir).with_tasks(config.tasks)
    return dataset.split(config.seed, config.train_fraction, config.val_fraction)


def cmd_train(config: RunConfig) -> None:
    set_precision(config.precision)
    train_set, val_set, test_set = _splits(config)
    with Stopwatch() as sw:
        result = train(
            TrainConfig.from_run_config(config),
            train_set,
            model_config_from_run_config(config, train_set.tasks, train_set.in_dim),
            val_dataset=val_set,
            checkpoint=config.checkpoint,
        )
        report, predictions = evaluate(
            result.model, test_set, mode=config.mode, max_n_tiles=config.max_n_tiles,
            bag_size=config.bag_size, sampling=config.sampling, z_order_mode=config.z_order_mode,
            seed=config.seed, workers=config.workers,
        )
    out = Path(config.out_dir)
    _write_table(report.to_frame(), out / "train_metrics.tsv")
    _write_table(pd.DataFrame({"epoch": range(1, len(result.report.loss_curve) + 1),
                               "loss": result.report.loss_curve}), out / "loss_curve.tsv")
    _write_table(predictions, out / "test_predictions.tsv")
    print(report.to_frame().to_string(index=False))
    _summary(config, "train", sw.seconds, checkpoint=config.checkpoint, metrics=report.metrics,
             loss_curve=result.report.loss_curve, train_seconds=result.report.wall_time)


def cmd_infer(config: RunConfig) -> None:
    if not config.slide:
        raise ConfigError("infer needs a bag file (--slide)")
    model = load_model(config.checkpoint, set_precision(config.precision))
    bag = read_bag(config.slide)
    if bag.in_dim != model.config.in_dim:
        raise FormatError(f"Bag {config.slide} has D_in={bag.in_dim}, checkpoint expects {model.config.in_dim}")
    with Stopwatch() as sw:
        preds, peak = predict_slide(model, bag, config.mode, config.max_n_tiles, config.bag_size,
                                    config.sampling, config.z_order_mode, derive_seed(config.seed, "infer"))
    decoded = model.decode(preds)
    for task in model.tasks:
        value = decoded[task.name]
        text = " ".join(f"{p:.4f}" for p in value) if task.is_classification else f"{value:.4f}"
        print(f"{task.name}\t{text}")
    print(json.dumps({"slide_id": bag.slide_id, "n_tiles": len(bag), "mode": config.mode, "predictions": decoded}))
    _summary(config, "infer", sw.seconds, slide=config.slide, predictions=decoded, peak_activation_bytes=peak)


def cmd_verify(config: RunConfig) -> None:
    with Stopwatch() as sw:
        results = run_verification(config.level, seed=config.seed)
    frame = results_frame(results)
    print(frame.to_string(index=False))
    _summary(config, "verify", sw.seconds, level=config.level,
             results={r.name: r.passed for r in results})
    raise_on_failure(results)


def cmd_ablate(config: RunConfig) -> None:
    set_precision(config.precision)
    train_set, val_set, test_set = _splits(config)
    with Stopwatch() as sw:
        table = run_ablation(config.axis, config.grid, config, AblationData(train_set, val_set, test_set))
    _write_table(table, Path(config.out_dir) / f"ablation_{config.axis}.tsv")
    print(table.to_string(index=False))
    _summary(config, "ablate", sw.seconds, axis=config.axis, rows=table.to_dict(orient="records"))


def cmd_bench(config: RunConfig) -> None:
    dtype = set_precision(config.precision)
    if Path(config.checkpoint).exists():
        model = load_model(config.checkpoint, dtype)
    else:
        logger.info(f"No checkpoint at {config.checkpoint}; benchmarking a randomly initialized model")
        model = build_model(model_config_from_run_config(config, task_specs(config.tasks)), seed=config.seed)
    with Stopwatch() as sw:
        report = bench_scaling(model, config.bench_n_grid, config.bag_size, config.bench_repeats, config.seed)
    _write_table(report.table, Path(config.out_dir) / "bench_scaling.tsv")
    print(report.table.to_string(index=False))
    print(f"time slope {report.time_slope:.3f}  reference slope {report.reference_slope:.3f}  "
          f"memory spread {report.memory_spread:.3f}")
    _summary(config, "bench", sw.seconds, time_slope=report.time_slope, reference_slope=report.reference_slope,
             memory_spread=report.memory_spread)


HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "infer": cmd_infer,
    "verify": cmd_verify,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
}


# -----------------------------------------------------
#  Main logic
# -----------------------------------------------------
def main(argv: Optional[List[str]] = None, environ: Optional[Dict[str, str]] = None) -> int:
    """
    Entry point of the path-rwkv command.

    Returns:
        Process exit code: 0 success, 1 usage/config, 2 data/format, 3 numeric, 4 property
    """
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args, environ)
        setup_logging(config.log_level, config.log_file or None)
        logger.info(f"path-rwkv {args.command} (config {config.config_hash()}, seed {config.seed})")
        HANDLERS[args.command](config)
    except PathRwkvError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    return 0


# -----------------------------------------------------
#  Run
# -----------------------------------------------------
if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\nInterrupted by user.")
        sys.exit(130)
