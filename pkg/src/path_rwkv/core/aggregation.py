"""
Bag-wise slide aggregation.

The local summary of a bag is the feature-wise max of its per-tile features;
`comb` merges summaries with the same max, so folding bag summaries in any order
equals summarizing the whole slide. `infer_slide` streams bags through a model
with carried recurrent state.
"""
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from path_rwkv.utils.errors import ContractError, DimensionError, EmptySlideError

logger = logging.getLogger(__name__)

DEFAULT_BAG_SIZE = 512


def local_summary(features: torch.Tensor) -> torch.Tensor:
    """
    Feature-wise max over the rows of [n, D].

    An empty bag returns the identity of max (a -inf vector) and logs a warning.
    """
    if features.dim() != 2:
        raise DimensionError(f"local_summary expects [n, D], got {tuple(features.shape)}")
    if features.shape[0] == 0:
        logger.warning("local_summary called on an empty bag; returning the -inf identity")
        return torch.full((features.shape[1],), float("-inf"), dtype=features.dtype, device=features.device)
    return features.amax(dim=0)


def comb(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Merge two summaries (componentwise max)."""
    if a.shape != b.shape:
        raise DimensionError(f"comb needs equal shapes, got {tuple(a.shape)} and {tuple(b.shape)}")
    return torch.maximum(a, b)


class RunningMax:
    """
    Per-task running max over every tile absorbed so far.

    Values start at -inf, the identity of max.
    """

    def __init__(self, tasks: Sequence[str], dim: int,
                 dtype: Optional[torch.dtype] = None, device: Optional[torch.device] = None):
        self.dim = dim
        self.values: Dict[str, torch.Tensor] = {
            name: torch.full((dim,), float("-inf"), dtype=dtype or torch.get_default_dtype(), device=device)
            for name in tasks
        }
        self.seen_count = 0

    def absorb(self, per_task: Mapping[str, torch.Tensor]) -> None:
        """Fold one bag of per-task tile features [n, D] into the running values."""
        if set(per_task) != set(self.values):
            raise ContractError(f"RunningMax tasks {sorted(self.values)} != {sorted(per_task)}")
        n = None
        for name, feats in per_task.items():
            self.values[name] = comb(self.values[name], local_summary(feats))
            n = feats.shape[0]
        self.seen_count += n or 0

    def result(self) -> Dict[str, torch.Tensor]:
        if self.seen_count == 0:
            raise EmptySlideError("RunningMax has not absorbed any tile")
        return dict(self.values)


# ===== Bag planning =====

@dataclass
class BagPlan:
    """
    Contiguous bags over a tile order.

    Attributes:
        order: Tile permutation the bags index into
        bounds: [start, stop) ranges into `order`
        bag_size: Maximum tiles per bag
    """

    order: np.ndarray
    bounds: List[Tuple[int, int]]
    bag_size: int

    @property
    def sizes(self) -> List[int]:
        return [stop - start for start, stop in self.bounds]

    def __len__(self) -> int:
        return len(self.bounds)

    def indices(self) -> Iterator[np.ndarray]:
        for start, stop in self.bounds:
            yield self.order[start:stop]


def plan_bags(n: int, bag_size: int, order: Optional[np.ndarray] = None) -> BagPlan:
    """
    Split N tiles into ceil(N / bag_size) contiguous bags over the given order.

    Examples:
        >>> plan_bags(10, 4).bounds
        [(0, 4), (4, 8), (8, 10)]
    """
    if n == 0:
        raise EmptySlideError("Cannot plan bags for a slide with no tiles")
    if n < 0 or bag_size < 1:
        raise ContractError(f"plan_bags needs N >= 1 and bag_size >= 1, got N={n}, bag_size={bag_size}")
    order = np.arange(n) if order is None else np.asarray(order)
    if order.shape != (n,):
        raise ContractError(f"Tile order has shape {order.shape}, expected ({n},)")
    bounds = [(start, min(start + bag_size, n)) for start in range(0, n, bag_size)]
    return BagPlan(order=order, bounds=bounds, bag_size=bag_size)


# ===== Activation accounting =====

class ActivationMeter:
    """
    Counts bytes of module outputs produced per chunk through forward hooks.

    `peak_bytes` is the largest per-chunk total, the live tile-activation footprint
    of streamed inference. Only forward passes of the thread that entered the meter
    are counted, so several meters can watch one shared model.
    """

    def __init__(self, model: nn.Module):
        self.model = model
        self.current = 0
        self.peak_bytes = 0
        self._handles: List[Any] = []
        self._owner: Optional[int] = None

    def _hook(self, module: nn.Module, inputs: Any, output: Any) -> None:
        if threading.get_ident() != self._owner:
            return
        outputs = output if isinstance(output, (list, tuple)) else [output]
        self.current += sum(t.numel() * t.element_size() for t in outputs if isinstance(t, torch.Tensor))

    def end_chunk(self) -> None:
        self.peak_bytes = max(self.peak_bytes, self.current)
        self.current = 0

    def __enter__(self) -> "ActivationMeter":
        self._owner = threading.get_ident()
        self._handles = [m.register_forward_hook(self._hook) for m in self.model.modules()]
        return self

    def __exit__(self, *exc) -> None:
        self.end_chunk()
        for handle in self._handles:
            handle.remove()
        self._handles = []
        self._owner = None


@contextmanager
def eval_mode(model: nn.Module) -> Iterator[nn.Module]:
    """Run a block in eval mode; a model already in eval mode is left untouched."""
    was_training = model.training
    if was_training:
        model.eval()
    try:
        yield model
    finally:
        if was_training:
            model.train()


# ===== Streamed inference =====

@dataclass
class InferenceResult:
    """
    Output of `infer_slide`.

    Attributes:
        features: Per-task slide features before the heads
        predictions: Per-task head outputs (logits or normalized value)
        n_tiles: Tiles processed
        n_bags: Non-empty bags processed
        peak_activation_bytes: Largest per-bag activation footprint
    """

    features: Dict[str, torch.Tensor]
    predictions: Dict[str, torch.Tensor]
    n_tiles: int
    n_bags: int
    peak_activation_bytes: int = 0
    bag_sizes: List[int] = field(default_factory=list)


def iter_bags(bag_stream: Union[Any, Iterable[Any]], bag_size: int) -> Iterator[Any]:
    """
    Yield TileBag chunks of at most `bag_size` tiles, in stream order.

    A single TileBag is split with `plan_bags`; chunks of an iterable larger than
    `bag_size` are split again.
    """
    chunks = [bag_stream] if hasattr(bag_stream, "features") else bag_stream
    for chunk in chunks:
        if len(chunk) <= bag_size:
            yield chunk
            continue
        for idx in plan_bags(len(chunk), bag_size).indices():
            yield chunk.subset(idx)


def infer_slide(
    bag_stream: Union[Any, Iterable[Any]],
    model: nn.Module,
    bag_size: int = DEFAULT_BAG_SIZE,
    meter: Optional[ActivationMeter] = None,
) -> InferenceResult:
    """
    Recurrent whole-slide inference without gradient recording.

    Each bag runs through the backbone with the carried state and is folded into the
    model's readout; the heads are applied once after the last bag.

    Args:
        bag_stream: One TileBag or an iterable of TileBag chunks, in tile order
        model: A PathRwkv model
        bag_size: Maximum tiles per bag

    Raises:
        EmptySlideError: If the stream holds no tile
    """
    if bag_size < 1:
        raise ContractError(f"bag_size must be >= 1, got {bag_size}")
    meter = meter or ActivationMeter(model)
    sizes: List[int] = []

    def on_chunk(n: int) -> None:
        sizes.append(n)
        meter.end_chunk()

    with eval_mode(model), torch.no_grad(), meter:
        features, _ = model.stream_features(iter_bags(bag_stream, bag_size), after_chunk=on_chunk)
        predictions = model.heads_forward(features)

    return InferenceResult(
        features=features,
        predictions=predictions,
        n_tiles=sum(sizes),
        n_bags=len(sizes),
        peak_activation_bytes=meter.peak_bytes,
        bag_sizes=sizes,
    )


# ===== Tile-level baselines =====

def _tile_matrix(tile_preds: Any) -> np.ndarray:
    preds = np.asarray(tile_preds, dtype=np.float64)
    if preds.ndim == 1:
        preds = preds[:, None]
    if preds.ndim != 2:
        raise DimensionError(f"Tile predictions must be [N, K], got {preds.shape}")
    if preds.shape[0] == 0:
        raise EmptySlideError("No tile predictions to aggregate")
    return preds


def slide_ave(tile_preds: Any) -> np.ndarray:
    """Column mean of per-tile predictions [N, K]."""
    return _tile_matrix(tile_preds).mean(axis=0)


def slide_max(tile_preds: Any) -> np.ndarray:
    """Column max of per-tile predictions [N, K]."""
    return _tile_matrix(tile_preds).max(axis=0)


# ===== Sampling variance =====

def scalar_prediction(pred: torch.Tensor, is_classification: bool) -> float:
    """Regression value, or probability of the last class."""
    if is_classification:
        return float(torch.softmax(pred.reshape(-1), dim=0)[-1])
    return float(pred.reshape(-1)[0])


def subset_prediction_variance(
    model: nn.Module,
    slide: Any,
    subset_size: int,
    trials: int = 100,
    seed: int = 0,
    task: Optional[str] = None,
    predict: Optional[Callable[[Any], float]] = None,
) -> float:
    """
    Monte-Carlo variance of a scalar prediction over uniformly sampled tile subsets.

    Subsets keep the slide's stored tile order. The scalar is the first task's output
    (or `task`) unless a custom `predict(bag) -> float` is given.

    Raises:
        ContractError: subset_size outside [1, N] or trials < 2
    """
    n = len(slide)
    if not 1 <= subset_size <= n:
        raise ContractError(f"subset_size must be in [1, {n}], got {subset_size}")
    if trials < 2:
        raise ContractError("subset_prediction_variance needs at least 2 trials")

    if predict is None:
        spec = model.task(task) if task else model.tasks[0]

        def predict(bag: Any) -> float:
            with eval_mode(model), torch.no_grad():
                preds = model(torch.as_tensor(bag.features), torch.as_tensor(bag.coords))
            return scalar_prediction(preds[spec.name], spec.is_classification)

    rng = np.random.default_rng(seed)
    values = np.array([
        predict(slide.subset(np.sort(rng.choice(n, size=subset_size, replace=False))))
        for _ in range(trials)
    ])
    return float(values.var(ddof=1))
