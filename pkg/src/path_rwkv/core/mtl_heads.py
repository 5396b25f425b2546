"""
Multi-task readout: task definitions, per-task projection, heads, the summed
masked loss and the three readout designs (ours, to, through).
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import torch
from torch import nn

from path_rwkv.core.aggregation import RunningMax
from path_rwkv.utils.errors import ConfigError, ContractError, EmptySlideError

logger = logging.getLogger(__name__)

MTL_DESIGNS = ("ours", "to", "through")


class TaskKind(str, Enum):
    CLASSIFICATION = "classification"
    REGRESSION = "regression"


@dataclass(frozen=True)
class TaskSpec:
    """
    One prediction target.

    Attributes:
        name: Task name, also the manifest column
        kind: classification or regression
        num_classes: Number of classes (classification only, >= 2)
    """

    name: str
    kind: TaskKind
    num_classes: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        if not self.name:
            raise ConfigError("Task name must not be empty")
        if self.kind is TaskKind.CLASSIFICATION and self.num_classes < 2:
            raise ConfigError(f"Classification task '{self.name}' needs num_classes >= 2")
        if self.kind is TaskKind.REGRESSION and self.num_classes not in (0, 1):
            raise ConfigError(f"Regression task '{self.name}' cannot declare classes")

    @property
    def is_classification(self) -> bool:
        return self.kind is TaskKind.CLASSIFICATION

    @property
    def loss(self) -> str:
        return "cross_entropy" if self.is_classification else "mean_absolute_error"

    @property
    def out_dim(self) -> int:
        return self.num_classes if self.is_classification else 1

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "kind": self.kind.value, "num_classes": self.num_classes}

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "TaskSpec":
        return cls(str(values["name"]), TaskKind(values["kind"]), int(values.get("num_classes", 0)))


@dataclass
class LabelSet:
    """Per-task optional labels of one slide (class index or real value)."""

    values: Dict[str, Optional[float]] = field(default_factory=dict)

    def get(self, name: str) -> Optional[float]:
        return self.values.get(name)

    def present(self, tasks: Sequence[TaskSpec]) -> List[TaskSpec]:
        return [t for t in tasks if self.values.get(t.name) is not None]

    def validate(self, tasks: Sequence[TaskSpec]) -> None:
        """Raises ContractError for out-of-range class indices."""
        for task in self.present(tasks):
            value = self.values[task.name]
            if task.is_classification and (value != int(value) or not 0 <= value < task.num_classes):
                raise ContractError(
                    f"Label {value} of task '{task.name}' is not a class index below {task.num_classes}"
                )


# ===== Projection and heads =====

def mtl_project(x: torch.Tensor, projection: nn.Linear, n_tasks: int) -> List[torch.Tensor]:
    """
    Project [..., N, D] to [..., N, D*T], reshape to [..., N, T, D] and split by task.

    Raises:
        ContractError: If n_tasks < 1 or the projection width is not D*T
    """
    if n_tasks < 1:
        raise ContractError("mtl_project needs at least one task")
    dim = x.shape[-1]
    if projection.out_features != dim * n_tasks:
        raise ContractError(f"Projection width {projection.out_features} != {dim} x {n_tasks}")
    projected = projection(x).reshape(*x.shape[:-1], n_tasks, dim)
    return list(projected.unbind(dim=-2))


class MtlProjection(nn.Module):
    """Linear D -> D*T followed by a per-task split."""

    def __init__(self, dim: int, n_tasks: int):
        super().__init__()
        if n_tasks < 1:
            raise ContractError("MtlProjection needs at least one task")
        self.n_tasks = n_tasks
        self.linear = nn.Linear(dim, dim * n_tasks)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        return mtl_project(x, self.linear, self.n_tasks)


def select_max_tile(task_feat: torch.Tensor) -> torch.Tensor:
    """
    Feature-wise max over the tile axis: [B, N, D] -> [B, D] (or [N, D] -> [D]).

    Raises:
        EmptySlideError: If N = 0
    """
    if task_feat.dim() < 2 or task_feat.shape[-2] == 0:
        raise EmptySlideError(f"select_max_tile needs at least one tile, got shape {tuple(task_feat.shape)}")
    return task_feat.amax(dim=-2)


class TaskHead(nn.Module):
    """Linear layer emitting logits (classification) or one value (regression)."""

    def __init__(self, dim: int, task: TaskSpec):
        super().__init__()
        self.task = task
        self.linear = nn.Linear(dim, task.out_dim)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        return self.linear(feat)


def head_forward(feat: torch.Tensor, task: TaskSpec, head: TaskHead) -> torch.Tensor:
    if head.task.name != task.name:
        raise ContractError(f"Head for '{head.task.name}' used for task '{task.name}'")
    return head(feat)


# ===== Loss =====

def task_loss(pred: torch.Tensor, target: float, task: TaskSpec) -> torch.Tensor:
    """Cross-entropy on logits, or absolute error on a (normalized) regression target."""
    if task.is_classification:
        logits = pred.reshape(1, -1)
        label = torch.tensor([int(target)], device=pred.device)
        return nn.functional.cross_entropy(logits, label)
    return (pred.reshape(()) - target).abs()


def total_loss(
    preds: Mapping[str, torch.Tensor],
    labels: LabelSet,
    tasks: Sequence[TaskSpec],
    target_stats: Optional[Mapping[str, Tuple[float, float]]] = None,
) -> Optional[torch.Tensor]:
    """
    Unweighted sum of the losses of tasks with a present label.

    Regression targets are z-scored with `target_stats[name] = (mean, std)` when given.

    Returns:
        Scalar loss, or None when every label is absent (sample is skipped)
    """
    terms = []
    for task in labels.present(tasks):
        target = float(labels.values[task.name])
        if not task.is_classification and target_stats and task.name in target_stats:
            mean, std = target_stats[task.name]
            target = (target - mean) / std
        terms.append(task_loss(preds[task.name], target, task))
    if not terms:
        return None
    return torch.stack(terms).sum()


# ===== Readout designs =====

class Readout(nn.Module):
    """
    Turns backbone outputs into one feature vector per task, bag by bag.

    `start()` creates an accumulator, `absorb()` folds one chunk of backbone
    outputs into it and `finish()` returns the per-task features. `extra_tokens()`
    are fed through the backbone after the last tile (None if the design needs none).
    """

    kind = ""

    def __init__(self, dim: int, tasks: Sequence[TaskSpec]):
        super().__init__()
        self.dim = dim
        self.task_names = [t.name for t in tasks]

    def extra_tokens(self) -> Optional[torch.Tensor]:
        return None

    def start(self, like: torch.Tensor) -> Any:
        raise NotImplementedError

    def absorb(self, acc: Any, hidden: torch.Tensor) -> None:
        raise NotImplementedError

    def finish(self, acc: Any, extra_hidden: Optional[torch.Tensor] = None) -> Dict[str, torch.Tensor]:
        raise NotImplementedError


class MaxTileReadout(Readout):
    """Projection to task features, then a running feature-wise max over tiles."""

    kind = "ours"

    def __init__(self, dim: int, tasks: Sequence[TaskSpec]):
        super().__init__(dim, tasks)
        self.projection = MtlProjection(dim, len(tasks))

    def start(self, like: torch.Tensor) -> RunningMax:
        return RunningMax(self.task_names, self.dim, dtype=like.dtype, device=like.device)

    def absorb(self, acc: RunningMax, hidden: torch.Tensor) -> None:
        acc.absorb(dict(zip(self.task_names, self.projection(hidden))))

    def finish(self, acc: RunningMax, extra_hidden: Optional[torch.Tensor] = None) -> Dict[str, torch.Tensor]:
        return acc.result()


@dataclass
class _MeanAccumulator:
    total: torch.Tensor
    count: int = 0


class MeanReadout(Readout):
    """Every head reads the mean backbone output; no projection."""

    kind = "to"

    def start(self, like: torch.Tensor) -> _MeanAccumulator:
        return _MeanAccumulator(torch.zeros(self.dim, dtype=like.dtype, device=like.device))

    def absorb(self, acc: _MeanAccumulator, hidden: torch.Tensor) -> None:
        acc.total = acc.total + hidden.sum(dim=0)
        acc.count += hidden.shape[0]

    def finish(self, acc: _MeanAccumulator, extra_hidden: Optional[torch.Tensor] = None) -> Dict[str, torch.Tensor]:
        if acc.count == 0:
            raise EmptySlideError("Mean readout saw no tiles")
        mean = acc.total / acc.count
        return {name: mean for name in self.task_names}


class ThroughReadout(Readout):
    """T learned tokens appended after the tiles; head t reads output position t."""

    kind = "through"

    def __init__(self, dim: int, tasks: Sequence[TaskSpec]):
        super().__init__(dim, tasks)
        self.tokens = nn.Parameter(torch.randn(len(tasks), dim) * 0.02)

    def extra_tokens(self) -> torch.Tensor:
        return self.tokens

    def start(self, like: torch.Tensor) -> None:
        return None

    def absorb(self, acc: None, hidden: torch.Tensor) -> None:
        pass

    def finish(self, acc: None, extra_hidden: Optional[torch.Tensor] = None) -> Dict[str, torch.Tensor]:
        if extra_hidden is None or extra_hidden.shape[0] != len(self.task_names):
            raise ContractError("Through readout needs the backbone outputs of its task tokens")
        return dict(zip(self.task_names, extra_hidden.unbind(dim=0)))


_READOUTS = {cls.kind: cls for cls in (MaxTileReadout, MeanReadout, ThroughReadout)}


def mtl_variant(kind: str, dim: int, tasks: Sequence[TaskSpec]) -> Readout:
    """
    Build the readout for an MTL design.

    Raises:
        ConfigError: Unknown design
    """
    if kind not in _READOUTS:
        raise ConfigError(f"Unknown MTL design '{kind}', expected one of {', '.join(MTL_DESIGNS)}")
    if not tasks:
        raise ContractError("At least one task is required")
    return _READOUTS[kind](dim, tasks)
