"""
Training loop and slide-level evaluation.

Training samples at most max_n_tiles tiles per slide and runs the whole sample as
one chunk; evaluation runs either the same sampled pass or recurrent bag-wise
inference over every tile, with the same weights.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from path_rwkv.core.aggregation import DEFAULT_BAG_SIZE, eval_mode, infer_slide
from path_rwkv.core.metrics import accuracy, macro_auc, pearson
from path_rwkv.core.model import ModelConfig, PathRwkv, build_model, load_model, save_model
from path_rwkv.core.mtl_heads import LabelSet, TaskSpec, total_loss
from path_rwkv.core.numerics import LrSchedule, ParamStore, backward, lr_at, set_precision
from path_rwkv.data.dataset import SlideDataset, SlideRecord
from path_rwkv.data.tiles import TileBag, sample_tiles
from path_rwkv.utils.errors import ConfigError, DatasetError, MetricError, NumericError
from path_rwkv.utils.general import Stopwatch, derive_seed, seed_everything
from path_rwkv.utils.logging_setup import LogCallback, make_log

logger = logging.getLogger(__name__)

EVAL_MODES = ("sampled", "recurrent")


@dataclass
class TrainConfig:
    """
    Training hyperparameters.

    Attributes:
        tasks: Task names to train (None = every dataset task)
    """

    epochs: int = 100
    warmup_epochs: int = 20
    base_lr: float = 1e-4
    floor_factor: float = 0.01
    batch_size: int = 4
    max_n_tiles: int = 2000
    sampling: str = "random"
    z_order_mode: str = "contiguous"
    precision: str = "float32"
    seed: int = 0
    tasks: Optional[List[str]] = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")

    @classmethod
    def from_run_config(cls, config: Any, tasks: Optional[Sequence[str]] = None) -> "TrainConfig":
        """Map a RunConfig; warmup longer than the run is scaled to a fifth of the epochs."""
        warmup = config.warmup_epochs
        if warmup >= config.epochs:
            warmup = config.epochs // 5
            logger.warning(f"warmup_epochs {config.warmup_epochs} >= epochs {config.epochs}; using {warmup}")
        return cls(
            epochs=config.epochs,
            warmup_epochs=warmup,
            base_lr=config.base_lr,
            floor_factor=config.floor_factor,
            batch_size=config.batch_size,
            max_n_tiles=config.max_n_tiles,
            sampling=config.sampling,
            z_order_mode=config.z_order_mode,
            precision=config.precision,
            seed=config.seed,
            tasks=list(tasks) if tasks is not None else list(config.tasks),
        )


def model_config_from_run_config(config: Any, tasks: Sequence[TaskSpec], in_dim: Optional[int] = None) -> ModelConfig:
    return ModelConfig(
        in_dim=in_dim or config.in_dim,
        embed_dim=config.embed_dim,
        depth=config.depth,
        n_heads=config.n_heads,
        lora_rank=config.lora_rank,
        decay_rank=config.decay_rank,
        channel_mix_ratio=config.channel_mix_ratio,
        use_pe=config.use_pe,
        mtl_design=config.mtl_design,
        tasks=list(tasks),
    )


@dataclass
class MetricReport:
    """
    Metrics of one run.

    Attributes:
        metrics: task -> {accuracy, auc} (classification) or {pearson} (regression)
        loss_curve: Mean training loss per epoch
        val_curve: Validation metrics per epoch (same layout as `metrics`)
        wall_time: Seconds
        peak_activation_bytes: Largest per-bag activation footprint seen
    """

    metrics: Dict[str, Dict[str, float]] = field(default_factory=dict)
    loss_curve: List[float] = field(default_factory=list)
    val_curve: List[Dict[str, Dict[str, float]]] = field(default_factory=list)
    wall_time: float = 0.0
    peak_activation_bytes: int = 0
    n_slides: int = 0

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"task": task, "metric": name, "value": value}
            for task, values in self.metrics.items()
            for name, value in values.items()
        ]
        return pd.DataFrame(rows, columns=["task", "metric", "value"])

    def mean_of(self, metric: str) -> float:
        values = [v[metric] for v in self.metrics.values() if metric in v and not math.isnan(v[metric])]
        return float(np.mean(values)) if values else float("nan")

    def summary(self) -> Dict[str, Any]:
        return {
            "metrics": self.metrics,
            "loss_curve": self.loss_curve,
            "wall_time": round(self.wall_time, 3),
            "peak_activation_bytes": self.peak_activation_bytes,
            "n_slides": self.n_slides,
        }


@dataclass
class TrainResult:
    model: PathRwkv
    report: MetricReport
    checkpoint: Optional[str] = None


# ===== Helpers =====

def regression_stats(records: Sequence[SlideRecord], tasks: Sequence[TaskSpec]) -> Dict[str, Tuple[float, float]]:
    """(mean, std) of each regression task's present labels."""
    stats = {}
    for task in tasks:
        if task.is_classification:
            continue
        values = np.array([r.labels.get(task.name) for r in records if r.labels.get(task.name) is not None])
        if values.size == 0:
            stats[task.name] = (0.0, 1.0)
            continue
        std = float(values.std())
        stats[task.name] = (float(values.mean()), std if std > 1e-8 else 1.0)
    return stats


def check_tasks(model: PathRwkv, dataset: SlideDataset) -> None:
    """
    Raises:
        ConfigError: If a model task is missing from the dataset or differs in kind
    """
    by_name = {t.name: t for t in dataset.tasks}
    for task in model.tasks:
        if by_name.get(task.name) != task:
            raise ConfigError(f"Model task {task} does not match dataset tasks {[t.name for t in dataset.tasks]}")


def _batches(items: Sequence[Any], size: int) -> List[Sequence[Any]]:
    return [items[i:i + size] for i in range(0, len(items), size)]


# ===== Training =====

def train(
    config: TrainConfig,
    dataset: SlideDataset,
    model_config: ModelConfig,
    val_dataset: Optional[SlideDataset] = None,
    checkpoint: Optional[str] = None,
    log_callback: Optional[LogCallback] = None,
) -> TrainResult:
    """
    Train a model on sampled tile sequences.

    Each batch of slides is processed slide by slide with gradient accumulation of
    loss / batch_size, followed by one Adam step at lr_at(epoch).

    Raises:
        DatasetError: If no slide has a label for the configured tasks
        NumericError: If a loss becomes non-finite
    """
    log = make_log(logger, log_callback)
    set_precision(config.precision)
    seed_everything(config.seed)

    names = config.tasks or [t.name for t in dataset.tasks]
    dataset = dataset.with_tasks(names)
    if val_dataset is not None:
        val_dataset = val_dataset.with_tasks(names)
    tasks = dataset.tasks
    model_config = replace(model_config, tasks=list(tasks), in_dim=dataset.in_dim or model_config.in_dim)

    records = [r for r in dataset.records if r.labels.present(tasks)]
    if len(records) < len(dataset.records):
        log(f"Skipping {len(dataset.records) - len(records)} slide(s) without labels for {names}", "WARNING")
    if not records:
        raise DatasetError(f"No training slide has a label for tasks {names}")

    model = build_model(model_config, seed=derive_seed(config.seed, "init"))
    model.target_stats.update(regression_stats(records, tasks))
    model.train()
    store = ParamStore(model, lr=config.base_lr)
    schedule = LrSchedule(config.base_lr, config.warmup_epochs, config.epochs, config.floor_factor)
    report = MetricReport(n_slides=len(records))

    log(f"Training on {len(records)} slides, tasks {names}, {config.epochs} epochs", "INFO")
    with Stopwatch() as sw:
        for epoch in range(config.epochs):
            lr = lr_at(schedule, epoch)
            order = np.random.default_rng(derive_seed(config.seed, "order", epoch)).permutation(len(records))
            epoch_losses = []
            for batch in _batches([records[i] for i in order], config.batch_size):
                for record in batch:
                    bag = sample_tiles(
                        dataset.bag(record), config.max_n_tiles, config.sampling,
                        seed=derive_seed(config.seed, "sample", epoch, record.slide_id),
                        z_order_mode=config.z_order_mode,
                    )
                    preds = model(bag.features, bag.coords)
                    loss = total_loss(preds, record.labels, tasks, model.target_stats)
                    if loss is None:
                        continue
                    if not torch.isfinite(loss):
                        raise NumericError(
                            f"Non-finite loss {loss.item()} at epoch {epoch}, slide {record.slide_id}, lr {lr:.3g}"
                        )
                    backward(loss / len(batch))
                    epoch_losses.append(loss.item())
                store.step(lr)

            report.loss_curve.append(float(np.mean(epoch_losses)))
            message = f"Epoch {epoch + 1}/{config.epochs} lr={lr:.3g} loss={report.loss_curve[-1]:.4f}"
            if val_dataset is not None and len(val_dataset):
                val_report, _ = evaluate(model, val_dataset, mode="sampled", max_n_tiles=config.max_n_tiles,
                                         seed=config.seed)
                report.val_curve.append(val_report.metrics)
                model.train()
                message += f" val={_format_metrics(val_report.metrics)}"
            log(message, "INFO")

    report.wall_time = sw.seconds
    if report.val_curve:
        report.metrics = report.val_curve[-1]
    if checkpoint:
        save_model(model, checkpoint)
    log(f"Training finished in {sw.seconds:.1f}s, final loss {report.loss_curve[-1]:.4f}", "SUCCESS")
    return TrainResult(model=model, report=report, checkpoint=checkpoint)


def _format_metrics(metrics: Mapping[str, Mapping[str, float]]) -> str:
    return " ".join(f"{task}:{name}={value:.3f}" for task, values in metrics.items() for name, value in values.items())


# ===== Evaluation =====

def predict_slide(
    model: PathRwkv,
    bag: TileBag,
    mode: str = "recurrent",
    max_n_tiles: int = 2000,
    bag_size: int = DEFAULT_BAG_SIZE,
    sampling: str = "random",
    z_order_mode: str = "contiguous",
    seed: int = 0,
) -> Tuple[Dict[str, torch.Tensor], int]:
    """
    Raw head outputs of one slide and the peak activation bytes (recurrent mode).

    sampled: slides with at most max_n_tiles tiles keep their stored order; larger
             slides are sampled as in training
    recurrent: all tiles, streamed in bags of bag_size
    """
    if mode == "recurrent":
        result = infer_slide(bag, model, bag_size)
        return result.predictions, result.peak_activation_bytes
    if mode != "sampled":
        raise ConfigError(f"Unknown evaluation mode '{mode}', expected one of {EVAL_MODES}")
    if len(bag) > max_n_tiles:
        bag = sample_tiles(bag, max_n_tiles, sampling, seed=derive_seed(seed, "eval", bag.slide_id),
                           z_order_mode=z_order_mode)
    with eval_mode(model), torch.no_grad():
        preds = model(bag.features, bag.coords)
    return preds, 0


def compute_metrics(
    tasks: Sequence[TaskSpec],
    decoded: Sequence[Mapping[str, Any]],
    labels: Sequence[LabelSet],
) -> Dict[str, Dict[str, float]]:
    """
    Per-task metrics over slides with a present label.

    Args:
        decoded: Per slide: class probabilities (list) or regression value, per task
        labels: Per slide LabelSet

    Undefined metrics (single class, constant values) are reported as NaN.
    """
    metrics: Dict[str, Dict[str, float]] = {}
    for task in tasks:
        rows = [(d[task.name], lab.get(task.name)) for d, lab in zip(decoded, labels) if lab.get(task.name) is not None]
        if not rows:
            logger.warning(f"No labelled slide for task '{task.name}'")
            continue
        preds, targets = zip(*rows)
        if task.is_classification:
            probs = np.asarray(preds, dtype=np.float64)
            y = np.asarray(targets, dtype=np.int64)
            values = {"accuracy": accuracy(probs.argmax(axis=1), y)}
            try:
                values["auc"] = macro_auc(probs, y)
            except MetricError as e:
                logger.warning(f"Task '{task.name}': {e}")
                values["auc"] = float("nan")
        else:
            try:
                values = {"pearson": pearson(preds, targets)}
            except MetricError as e:
                logger.warning(f"Task '{task.name}': {e}")
                values = {"pearson": float("nan")}
        metrics[task.name] = values
    return metrics


def evaluate(
    model: Union[PathRwkv, str],
    dataset: SlideDataset,
    mode: str = "recurrent",
    max_n_tiles: int = 2000,
    bag_size: int = DEFAULT_BAG_SIZE,
    sampling: str = "random",
    z_order_mode: str = "contiguous",
    seed: int = 0,
    workers: int = 1,
) -> Tuple[MetricReport, pd.DataFrame]:
    """
    Evaluate a model (or checkpoint path) on a dataset.

    Returns:
        (MetricReport, per-slide prediction table with columns slide_id, task, prediction, label)

    Raises:
        ConfigError: Unknown mode or model tasks missing from the dataset
    """
    if isinstance(model, str):
        model = load_model(model, dtype=torch.get_default_dtype())
    if mode not in EVAL_MODES:
        raise ConfigError(f"Unknown evaluation mode '{mode}', expected one of {EVAL_MODES}")
    check_tasks(model, dataset)

    def run(record: SlideRecord) -> Tuple[Dict[str, Any], int]:
        preds, peak = predict_slide(model, dataset.bag(record), mode, max_n_tiles, bag_size,
                                    sampling, z_order_mode, seed)
        return model.decode(preds), peak

    with Stopwatch() as sw, eval_mode(model):
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outputs = list(pool.map(run, dataset.records))
        else:
            outputs = [run(record) for record in dataset.records]

    decoded = [d for d, _ in outputs]
    labels = [r.labels for r in dataset.records]
    report = MetricReport(
        metrics=compute_metrics(model.tasks, decoded, labels),
        wall_time=sw.seconds,
        peak_activation_bytes=max((p for _, p in outputs), default=0),
        n_slides=len(dataset),
    )
    rows = [
        {"slide_id": r.slide_id, "task": t.name, "prediction": d[t.name], "label": r.labels.get(t.name)}
        for r, d in zip(dataset.records, decoded)
        for t in model.tasks
    ]
    return report, pd.DataFrame(rows, columns=["slide_id", "task", "prediction", "label"])
