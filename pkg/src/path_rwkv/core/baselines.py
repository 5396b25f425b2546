"""
Tile-level baselines: a linear head per task on raw tile embeddings, trained with
the slide label copied to every tile, then pooled to slide level by mean or max.
"""
import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from path_rwkv.core.aggregation import slide_ave, slide_max
from path_rwkv.core.mtl_heads import TaskSpec
from path_rwkv.core.numerics import ParamStore, backward
from path_rwkv.core.trainer import MetricReport, compute_metrics, regression_stats
from path_rwkv.data.dataset import SlideDataset
from path_rwkv.data.tiles import sample_tiles
from path_rwkv.utils.errors import ConfigError, DatasetError
from path_rwkv.utils.general import Stopwatch, derive_seed
from path_rwkv.utils.logging_setup import LogCallback, make_log

logger = logging.getLogger(__name__)

POOLINGS = {"ave": slide_ave, "max": slide_max}


class TileLinearModel(nn.Module):
    """One linear layer per task over tile features."""

    def __init__(self, in_dim: int, tasks: Sequence[TaskSpec]):
        super().__init__()
        self.tasks = list(tasks)
        self.heads = nn.ModuleDict({t.name: nn.Linear(in_dim, t.out_dim) for t in self.tasks})
        self.target_stats: Dict[str, Tuple[float, float]] = {}

    def forward(self, features: torch.Tensor) -> Dict[str, torch.Tensor]:
        return {name: head(features) for name, head in self.heads.items()}


def _tile_loss(preds: Dict[str, torch.Tensor], labels: Any, model: TileLinearModel) -> Optional[torch.Tensor]:
    terms = []
    for task in labels.present(model.tasks):
        value = float(labels.get(task.name))
        out = preds[task.name]
        if task.is_classification:
            target = torch.full((out.shape[0],), int(value), dtype=torch.long)
            terms.append(nn.functional.cross_entropy(out, target))
        else:
            mean, std = model.target_stats.get(task.name, (0.0, 1.0))
            terms.append((out[:, 0] - (value - mean) / std).abs().mean())
    return torch.stack(terms).sum() if terms else None


def train_tile_baseline(
    dataset: SlideDataset,
    epochs: int = 20,
    lr: float = 1e-2,
    max_tiles: int = 256,
    seed: int = 0,
    log_callback: Optional[LogCallback] = None,
) -> TileLinearModel:
    """
    Fit per-tile linear heads with slide labels broadcast to tiles.

    Raises:
        DatasetError: If no slide carries a label
    """
    log = make_log(logger, log_callback)
    records = [r for r in dataset.records if r.labels.present(dataset.tasks)]
    if not records:
        raise DatasetError("No labelled slide for the tile baseline")

    torch.manual_seed(derive_seed(seed, "tile-baseline"))
    model = TileLinearModel(dataset.in_dim, dataset.tasks)
    model.target_stats = regression_stats(records, dataset.tasks)
    store = ParamStore(model, lr=lr)
    dtype = torch.get_default_dtype()

    for epoch in range(epochs):
        losses = []
        order = np.random.default_rng(derive_seed(seed, "tile-order", epoch)).permutation(len(records))
        for i in order:
            record = records[i]
            bag = sample_tiles(dataset.bag(record), max_tiles, "random",
                               seed=derive_seed(seed, "tile-sample", epoch, record.slide_id))
            loss = _tile_loss(model(torch.as_tensor(bag.features, dtype=dtype)), record.labels, model)
            if loss is None:
                continue
            backward(loss)
            store.step(lr)
            losses.append(loss.item())
        log(f"Tile baseline epoch {epoch + 1}/{epochs} loss={np.mean(losses):.4f}", "DEBUG")
    return model


@torch.no_grad()
def tile_predictions(model: TileLinearModel, features: np.ndarray) -> Dict[str, np.ndarray]:
    """Per task: tile class probabilities [N, K] or tile values [N, 1] in target units."""
    out = model(torch.as_tensor(features, dtype=torch.get_default_dtype()))
    preds = {}
    for task in model.tasks:
        raw = out[task.name]
        if task.is_classification:
            preds[task.name] = torch.softmax(raw, dim=1).numpy()
        else:
            mean, std = model.target_stats.get(task.name, (0.0, 1.0))
            preds[task.name] = raw.numpy() * std + mean
    return preds


def evaluate_tile_baseline(model: TileLinearModel, dataset: SlideDataset, pooling: str = "ave") -> MetricReport:
    """
    Slide metrics from pooled tile predictions.

    Max-pooled class probabilities are renormalized to sum to 1.
    """
    if pooling not in POOLINGS:
        raise ConfigError(f"Unknown pooling '{pooling}', expected one of {list(POOLINGS)}")
    pool = POOLINGS[pooling]
    decoded: List[Dict[str, Any]] = []
    with Stopwatch() as sw:
        for record in dataset.records:
            slide = {}
            tile_preds = tile_predictions(model, dataset.bag(record).features)
            for task in model.tasks:
                pooled = pool(tile_preds[task.name])
                if task.is_classification:
                    slide[task.name] = (pooled / pooled.sum()).tolist()
                else:
                    slide[task.name] = float(pooled[0])
            decoded.append(slide)
    return MetricReport(
        metrics=compute_metrics(model.tasks, decoded, [r.labels for r in dataset.records]),
        wall_time=sw.seconds,
        n_slides=len(dataset),
    )
