"""
Ablation runner, scaling benchmark and sampled-gradient bias experiment.
"""
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from path_rwkv.core.aggregation import infer_slide
from path_rwkv.core.baselines import POOLINGS, evaluate_tile_baseline, train_tile_baseline
from path_rwkv.core.trainer import (
    MetricReport, TrainConfig, evaluate, model_config_from_run_config, train,
)
from path_rwkv.data.dataset import SlideDataset
from path_rwkv.data.tiles import TileBag
from path_rwkv.utils.errors import ConfigError
from path_rwkv.utils.general import derive_seed
from path_rwkv.utils.logging_setup import LogCallback, make_log

logger = logging.getLogger(__name__)

AXES = ("sampling", "structure", "max_n_tiles", "mtl_grouping", "mtl_design", "pe", "dim", "baseline")

DEFAULT_GRIDS: Dict[str, List[Any]] = {
    "sampling": ["z_order", "random"],
    "structure": ["sampled", "recurrent"],
    "max_n_tiles": [1000, 2000, 5000],
    "mtl_grouping": [],
    "mtl_design": ["through", "to", "ours"],
    "pe": [False, True],
    "dim": [512, 768, 1024, 1536],
    "baseline": ["ave", "max"],
}

METRIC_ABBREV = {"accuracy": "acc", "auc": "auc", "pearson": "corr"}


# ===== Grid values and row labels =====

def _as_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("true", "1", "yes", "w/pe", "on"):
        return True
    if text in ("false", "0", "no", "o/pe", "off"):
        return False
    raise ConfigError(f"Cannot read {value!r} as a PE switch")


def row_label(axis: str, value: Any) -> str:
    if axis == "sampling":
        return {"z_order": "Sample Z-Order", "random": "Sample Random"}[value]
    if axis == "structure":
        return {"sampled": "Structure Sample", "recurrent": "Structure Recurrent"}[value]
    if axis == "max_n_tiles":
        return f"Max-N-Tiles {value}"
    if axis == "mtl_design":
        return {"through": "MTL-Through", "to": "MTL-To", "ours": "MTL-Ours"}[value]
    if axis == "pe":
        return "W/PE" if value else "O/PE"
    if axis == "dim":
        return f"D-{value}"
    if axis == "baseline":
        return {"ave": "SlideAve", "max": "SlideMax"}[value]
    return str(value)


def _normalize_grid(axis: str, grid: Sequence[Any]) -> List[Any]:
    values = list(grid) or list(DEFAULT_GRIDS[axis])
    if axis == "pe":
        return [_as_bool(v) for v in values]
    if axis in ("max_n_tiles", "dim"):
        return [int(v) for v in values]
    allowed = {"sampling": ("z_order", "random"), "structure": ("sampled", "recurrent"),
               "mtl_design": ("through", "to", "ours"), "baseline": tuple(POOLINGS)}.get(axis)
    if allowed:
        bad = [v for v in values if v not in allowed]
        if bad:
            raise ConfigError(f"Invalid {axis} value(s) {bad}, expected {allowed}")
    return values


def mtl_groupings(task_names: Sequence[str]) -> List[Tuple[str, List[List[str]]]]:
    """
    Task groupings compared by the MTL grouping ablation.

    STL: every task alone. Pairs anchored on the first task ({first, x} plus the
    remaining tasks as one group). (T-1)-subsets trained jointly with the leftover
    task taken from its single-task run. MTL-All: one joint model.

    Returns:
        (label, groups) per row; labels use task initials, e.g. MTL-NT
    """
    names = list(task_names)
    if not names:
        raise ConfigError("mtl_grouping needs at least one task")
    initials = lambda group: "".join(n[0].upper() for n in group)
    rows: List[Tuple[str, List[List[str]]]] = [("STL", [[n] for n in names])]
    seen = {"STL"}

    def add(group: List[str], rest: List[List[str]]) -> None:
        label = "MTL-All" if len(group) == len(names) else f"MTL-{initials(group)}"
        if label not in seen and len(group) > 1:
            seen.add(label)
            rows.append((label, [group] + rest))

    first = names[0]
    for other in names[1:]:
        rest = [n for n in names[1:] if n != other]
        add([first, other], [rest] if rest else [])
    if len(names) > 3:
        for leftover in reversed(names):
            group = [n for n in names if n != leftover]
            add(group, [[leftover]])
    add(names, [])
    return rows


def _metric_columns(report: MetricReport) -> Dict[str, float]:
    return {
        f"{task}.{METRIC_ABBREV.get(name, name)}": value
        for task, values in report.metrics.items()
        for name, value in values.items()
    }


# ===== Ablation =====

@dataclass
class AblationData:
    """Train/validation/test views used by every ablation cell."""

    train: SlideDataset
    val: Optional[SlideDataset]
    test: SlideDataset


def _train_and_eval(config: Any, data: AblationData, tasks: Sequence[str],
                    modes: Sequence[str], log_callback: Optional[LogCallback]) -> Dict[str, MetricReport]:
    train_set = data.train.with_tasks(tasks)
    result = train(
        TrainConfig.from_run_config(config, tasks),
        train_set,
        model_config_from_run_config(config, train_set.tasks, train_set.in_dim),
        val_dataset=None,
        log_callback=log_callback,
    )
    test_set = data.test.with_tasks(tasks)
    reports = {}
    for mode in modes:
        reports[mode], _ = evaluate(
            result.model, test_set, mode=mode, max_n_tiles=config.max_n_tiles, bag_size=config.bag_size,
            sampling=config.sampling, z_order_mode=config.z_order_mode, seed=config.seed,
            workers=config.workers,
        )
    return reports


def run_ablation(
    axis: str,
    grid: Sequence[Any],
    config: Any,
    data: AblationData,
    log_callback: Optional[LogCallback] = None,
) -> pd.DataFrame:
    """
    Train and evaluate one model per grid value of an ablation axis.

    Every cell uses the same seed and split; the structure axis trains once and
    evaluates the same weights in both modes.

    Returns:
        One row per setting: label column "setting", then "<task>.<metric>" columns

    Raises:
        ConfigError: Unknown axis or invalid grid value
    """
    if axis not in AXES:
        raise ConfigError(f"Unknown ablation axis '{axis}', expected one of {', '.join(AXES)}")
    log = make_log(logger, log_callback)
    tasks = list(config.tasks)
    rows: List[Dict[str, Any]] = []

    def emit(label: str, report: MetricReport, extra: Optional[Dict[str, Any]] = None) -> None:
        row = {"setting": label, **_metric_columns(report), **(extra or {})}
        rows.append(row)
        log(f"{axis}: {label} done", "INFO")

    if axis == "structure":
        modes = _normalize_grid(axis, grid)
        reports = _train_and_eval(config, data, tasks, modes, log_callback)
        for mode in modes:
            emit(row_label(axis, mode), reports[mode])

    elif axis == "mtl_grouping":
        selected = [str(v) for v in grid]
        stl_cache: Dict[str, MetricReport] = {}
        for label, groups in mtl_groupings(tasks):
            if selected and label not in selected:
                continue
            merged = MetricReport()
            for group in groups:
                if len(group) == 1 and group[0] in stl_cache:
                    report = stl_cache[group[0]]
                else:
                    report = _train_and_eval(config, data, group, [config.mode], log_callback)[config.mode]
                    if len(group) == 1:
                        stl_cache[group[0]] = report
                merged.metrics.update(report.metrics)
            merged.metrics = {t: merged.metrics[t] for t in tasks if t in merged.metrics}
            emit(label, merged)

    elif axis == "baseline":
        poolings = _normalize_grid(axis, grid)
        baseline = train_tile_baseline(data.train.with_tasks(tasks), epochs=config.epochs,
                                       max_tiles=config.max_n_tiles, seed=config.seed, log_callback=log_callback)
        for pooling in poolings:
            emit(row_label(axis, pooling), evaluate_tile_baseline(baseline, data.test.with_tasks(tasks), pooling))

    else:
        key = {"pe": "use_pe", "dim": "embed_dim"}.get(axis, axis)
        for value in _normalize_grid(axis, grid):
            cell = replace(config, **{key: value})
            report = _train_and_eval(cell, data, tasks, [cell.mode], log_callback)[cell.mode]
            emit(row_label(axis, value), report, {"wall_time": round(report.wall_time, 3)})

    return pd.DataFrame(rows)


# ===== Scaling benchmark =====

def random_bag(n: int, in_dim: int, seed: int = 0, slide_id: str = "bench") -> TileBag:
    """N random tiles on the row-major prefix of a square grid."""
    rng = np.random.default_rng(seed)
    side = int(math.ceil(math.sqrt(n)))
    idx = np.arange(n)
    coords = np.stack([idx % side, idx // side], axis=1)
    return TileBag(rng.standard_normal((n, in_dim)).astype(np.float32), coords, slide_id)


@torch.no_grad()
def quadratic_attention_reference(x: torch.Tensor, block: int = 1024) -> torch.Tensor:
    """
    Full softmax self-attention over all N tiles followed by mean pooling.

    Rows are processed in blocks so memory stays O(block * N); time is O(N^2 D).
    """
    scale = 1.0 / math.sqrt(x.shape[1])
    pooled = torch.zeros(x.shape[1], dtype=x.dtype)
    for start in range(0, x.shape[0], block):
        q = x[start:start + block]
        weights = torch.softmax((q @ x.T) * scale, dim=1)
        pooled += (weights @ x).sum(dim=0)
    return pooled / x.shape[0]


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    if len(xs) < 2:
        return float("nan")
    return float(np.polyfit(np.log(np.asarray(xs, dtype=np.float64)), np.log(np.asarray(ys, dtype=np.float64)), 1)[0])


@dataclass
class ScalingReport:
    table: pd.DataFrame
    time_slope: float
    reference_slope: float
    memory_spread: float


def _best_time(fn: Callable[[], Any], repeats: int) -> float:
    best = float("inf")
    for _ in range(max(1, repeats)):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench_scaling(
    model: Any,
    n_grid: Sequence[int],
    bag_size: int = 512,
    repeats: int = 1,
    seed: int = 0,
    with_reference: bool = True,
    log_callback: Optional[LogCallback] = None,
) -> ScalingReport:
    """
    Inference time and peak activation footprint of recurrent inference versus N,
    next to a quadratic self-attention reference.

    Returns:
        ScalingReport with a per-N table, log-log time slopes and the relative
        spread (max/min - 1) of the peak activation footprint
    """
    n_grid = [int(n) for n in n_grid]
    if any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise ConfigError(f"bench N grid must be increasing, got {n_grid}")
    log = make_log(logger, log_callback)
    rows = []
    for n in n_grid:
        bag = random_bag(n, model.config.in_dim, seed=derive_seed(seed, "bench", n))
        peak = {}

        def run_recurrent() -> None:
            peak["bytes"] = infer_slide(bag, model, bag_size).peak_activation_bytes

        row = {"n_tiles": n, "recurrent_s": _best_time(run_recurrent, repeats), "peak_activation_bytes": peak["bytes"]}
        if with_reference:
            with torch.no_grad():
                x = model.embed(bag.features, bag.coords)
            row["reference_s"] = _best_time(lambda: quadratic_attention_reference(x), repeats)
        rows.append(row)
        log(f"bench N={n}: recurrent {row['recurrent_s']:.3f}s", "INFO")

    table = pd.DataFrame(rows)
    peaks = table["peak_activation_bytes"].to_numpy(dtype=np.float64)
    return ScalingReport(
        table=table,
        time_slope=loglog_slope(table["n_tiles"], table["recurrent_s"]),
        reference_slope=loglog_slope(table["n_tiles"], table["reference_s"]) if with_reference else float("nan"),
        memory_spread=float(peaks.max() / peaks.min() - 1.0) if peaks.min() > 0 else float("nan"),
    )


# ===== Sampled-gradient bias =====

@dataclass
class GradientBiasReport:
    """
    Attributes:
        trial_counts: Numbers of sampled bags averaged
        errors: Mean |avg sampled gradient - full gradient| per trial count (mean aggregator, affine loss)
        slope: Log-log slope of errors against trial counts
        squared_loss_bias: Error at the largest trial count for a squared loss
        max_aggregator_bias: Error at the largest trial count for the max aggregator
    """

    trial_counts: List[int]
    errors: List[float]
    slope: float
    squared_loss_bias: float = 0.0
    max_aggregator_bias: float = 0.0
    table: pd.DataFrame = field(default_factory=pd.DataFrame)


def _sampled_gradient(x: torch.Tensor, weight: torch.Tensor, idx: torch.Tensor,
                      aggregate: str, loss: str, target: float) -> torch.Tensor:
    w = weight.detach().clone().requires_grad_(True)
    bags = x[idx]  # [trials, m, d]
    z = bags.mean(dim=1) if aggregate == "mean" else bags.amax(dim=1)
    pred = z @ w
    per_bag = pred if loss == "affine" else (pred - target) ** 2
    (grad,) = torch.autograd.grad(per_bag.mean(), w)
    return grad


def gradient_bias_experiment(
    trial_counts: Sequence[int] = (100, 1000, 10000),
    n_tiles: int = 256,
    bag_size: int = 32,
    dim: int = 16,
    repeats: int = 20,
    seed: int = 0,
) -> GradientBiasReport:
    """
    Compare the average gradient over sampled bags with the full-slide gradient.

    A linear head reads a mean-pooled bag; with a loss affine in the prediction the
    sampled-bag gradient is unbiased, so the error of its average shrinks like
    1/sqrt(trials). The same measurement is reported for a squared loss and for max
    pooling, where the gradient is biased.
    """
    gen = torch.Generator().manual_seed(derive_seed(seed, "gradient-bias"))
    x = torch.randn(n_tiles, dim, generator=gen, dtype=torch.float64)
    weight = torch.randn(dim, generator=gen, dtype=torch.float64)
    target = 0.5

    def full_gradient(aggregate: str, loss: str) -> torch.Tensor:
        idx = torch.arange(n_tiles).unsqueeze(0)
        return _sampled_gradient(x, weight, idx, aggregate, loss, target)

    def bag_indices(trials: int) -> torch.Tensor:
        keys = torch.rand(trials, n_tiles, generator=gen, dtype=torch.float64)
        return keys.argsort(dim=1)[:, :bag_size]

    def mean_error(trials: int, aggregate: str, loss: str) -> float:
        full = full_gradient(aggregate, loss)
        errs = [
            float((_sampled_gradient(x, weight, bag_indices(trials), aggregate, loss, target) - full).norm())
            for _ in range(repeats)
        ]
        return float(np.mean(errs))

    counts = [int(t) for t in trial_counts]
    errors = [mean_error(t, "mean", "affine") for t in counts]
    largest = counts[-1]
    table = pd.DataFrame({"trials": counts, "error": errors})
    return GradientBiasReport(
        trial_counts=counts,
        errors=errors,
        slope=loglog_slope(counts, errors),
        squared_loss_bias=mean_error(largest, "mean", "squared"),
        max_aggregator_bias=mean_error(largest, "max", "affine"),
        table=table,
    )
