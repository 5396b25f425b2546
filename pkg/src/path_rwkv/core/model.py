"""
PathRwkv slide model: tile projection + positional embedding, a stack of RWKV
blocks, an MTL readout and one head per task. Checkpoint save/load.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import yaml
from torch import nn

from path_rwkv.core.mtl_heads import MTL_DESIGNS, TaskHead, TaskSpec, mtl_variant
from path_rwkv.core.numerics import load_tensors, save_tensors
from path_rwkv.core.rwkv_core import RwkvBlock, RwkvState
from path_rwkv.data.tiles import positional_embedding
from path_rwkv.utils.errors import ConfigError, EmptySlideError, FormatError

logger = logging.getLogger(__name__)

SIDECAR_SUFFIX = ".yaml"


@dataclass
class ModelConfig:
    """
    Architecture hyperparameters.

    n_heads = 0 selects max(1, embed_dim // 64).
    """

    in_dim: int = 384
    embed_dim: int = 128
    depth: int = 2
    n_heads: int = 0
    lora_rank: int = 32
    decay_rank: int = 64
    channel_mix_ratio: float = 3.5
    use_pe: bool = True
    mtl_design: str = "ours"
    tasks: List[TaskSpec] = field(default_factory=list)

    @property
    def heads(self) -> int:
        return self.n_heads or max(1, self.embed_dim // 64)

    def validate(self) -> None:
        if self.in_dim < 1 or self.embed_dim < 1 or self.depth < 1:
            raise ConfigError("in_dim, embed_dim and depth must be positive")
        if self.embed_dim % 4:
            raise ConfigError(f"embed_dim must be divisible by 4, got {self.embed_dim}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by {self.heads} heads")
        if self.mtl_design not in MTL_DESIGNS:
            raise ConfigError(f"Unknown MTL design '{self.mtl_design}'")
        if not self.tasks:
            raise ConfigError("Model needs at least one task")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ConfigError(f"Duplicate task names: {names}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "in_dim": self.in_dim,
            "embed_dim": self.embed_dim,
            "depth": self.depth,
            "n_heads": self.n_heads,
            "lora_rank": self.lora_rank,
            "decay_rank": self.decay_rank,
            "channel_mix_ratio": self.channel_mix_ratio,
            "use_pe": self.use_pe,
            "mtl_design": self.mtl_design,
            "tasks": [t.to_dict() for t in self.tasks],
        }

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "ModelConfig":
        values = dict(values)
        values["tasks"] = [TaskSpec.from_dict(t) for t in values.get("tasks", [])]
        return cls(**values)


class PathRwkv(nn.Module):
    """
    Slide-level multi-task model over a tile sequence.

    `forward` processes the whole sequence as one chunk (training). `stream_features`
    processes it bag by bag with carried state (inference); both give the same
    per-task features for the same tile order.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.tasks: List[TaskSpec] = list(config.tasks)
        dim = config.embed_dim

        self.input_proj = nn.Linear(config.in_dim, dim)
        self.blocks = nn.ModuleList(
            RwkvBlock(dim, config.heads, config.lora_rank, config.decay_rank,
                      config.channel_mix_ratio, layer_id=i, n_layers=config.depth)
            for i in range(config.depth)
        )
        self.ln_out = nn.LayerNorm(dim)
        self.readout = mtl_variant(config.mtl_design, dim, self.tasks)
        self.heads = nn.ModuleDict({t.name: TaskHead(dim, t) for t in self.tasks})
        # Regression targets are z-scored with these (mean, std) pairs.
        self.target_stats: Dict[str, Tuple[float, float]] = {
            t.name: (0.0, 1.0) for t in self.tasks if not t.is_classification
        }

    @property
    def dtype(self) -> torch.dtype:
        return self.input_proj.weight.dtype

    def task(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise ConfigError(f"Model has no task '{name}'")

    def initial_state(self) -> RwkvState:
        return RwkvState.fresh(self.config.depth, self.config.embed_dim, self.config.heads,
                               dtype=self.dtype, device=self.input_proj.weight.device)

    # ===== Backbone =====

    def embed(self, features: Any, coords: Any) -> torch.Tensor:
        """Project tile features [n, D_in] and add the positional embedding of coords [n, 2]."""
        device = self.input_proj.weight.device
        x = torch.as_tensor(features, dtype=self.dtype, device=device)
        if x.dim() != 2 or x.shape[1] != self.config.in_dim:
            raise FormatError(f"Tile features have shape {tuple(x.shape)}, model expects [n, {self.config.in_dim}]")
        coords = coords.detach().cpu().numpy() if isinstance(coords, torch.Tensor) else np.asarray(coords)
        pe = positional_embedding(coords, self.config.embed_dim, self.config.use_pe, dtype=np.float64)
        return self.input_proj(x) + torch.as_tensor(pe, dtype=self.dtype, device=device)

    def backbone(self, x: torch.Tensor, state: RwkvState) -> torch.Tensor:
        """Run one chunk [L, D] through every block, advancing `state`."""
        for i, block in enumerate(self.blocks):
            x = block(x, state.slot(i))
        state.tokens_seen += x.shape[0]
        return self.ln_out(x)

    def backbone_step(self, x_t: torch.Tensor, state: RwkvState) -> torch.Tensor:
        """Reference recurrence: one token [D] through every block."""
        for i, block in enumerate(self.blocks):
            x_t = block.step(x_t, state.slot(i))
        state.tokens_seen += 1
        return self.ln_out(x_t)

    # ===== Readout =====

    def _run_chunks(
        self,
        chunks: Iterable[Tuple[Any, Any]],
        state: RwkvState,
        after_chunk: Optional[Callable[[int], None]] = None,
    ) -> Dict[str, torch.Tensor]:
        acc = None
        seen = False
        for features, coords in chunks:
            n = len(features)
            if n == 0:
                logger.warning("Skipping a bag with no tiles")
                continue
            hidden = self.backbone(self.embed(features, coords), state)
            if not seen:
                acc = self.readout.start(hidden)
                seen = True
            self.readout.absorb(acc, hidden)
            if after_chunk:
                after_chunk(n)
        if not seen:
            raise EmptySlideError("Slide has no tiles")
        extra = self.readout.extra_tokens()
        extra_hidden = self.backbone(extra.to(self.dtype), state) if extra is not None else None
        return self.readout.finish(acc, extra_hidden)

    def stream_features(
        self,
        bags: Iterable[Any],
        state: Optional[RwkvState] = None,
        after_chunk: Optional[Callable[[int], None]] = None,
    ) -> Tuple[Dict[str, torch.Tensor], RwkvState]:
        """
        Per-task slide features from TileBag chunks processed in order with carried state.

        Returns:
            (features per task, final state)
        """
        state = state or self.initial_state()
        features = self._run_chunks(((b.features, b.coords) for b in bags), state, after_chunk)
        return features, state

    def heads_forward(self, features: Mapping[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
        return {name: head(features[name]) for name, head in self.heads.items()}

    def forward(self, features: Any, coords: Any) -> Dict[str, torch.Tensor]:
        """Single-chunk pass over all tiles: per-task logits or normalized values."""
        task_features = self._run_chunks([(features, coords)], self.initial_state())
        return self.heads_forward(task_features)

    # ===== Output decoding =====

    def denormalize(self, name: str, value: float) -> float:
        mean, std = self.target_stats.get(name, (0.0, 1.0))
        return value * std + mean

    def decode(self, preds: Mapping[str, torch.Tensor]) -> Dict[str, Any]:
        """Class probabilities (list) or regression value in target units, per task."""
        out: Dict[str, Any] = {}
        for task in self.tasks:
            pred = preds[task.name].detach().reshape(-1)
            if task.is_classification:
                out[task.name] = torch.softmax(pred, dim=0).tolist()
            else:
                out[task.name] = self.denormalize(task.name, float(pred[0]))
        return out


def build_model(config: ModelConfig, seed: Optional[int] = None) -> PathRwkv:
    """Construct a model; parameter init is seeded when `seed` is given."""
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return PathRwkv(config)
    return PathRwkv(config)


@torch.no_grad()
def perturb_parameters(module: nn.Module, seed: int, scale: float = 0.3) -> nn.Module:
    """Add seeded Gaussian noise to every parameter (random non-initial configurations)."""
    gen = torch.Generator().manual_seed(seed)
    for param in module.parameters():
        noise = torch.randn(param.shape, generator=gen, dtype=torch.float64)
        param.add_(noise.to(param.dtype) * scale)
    return module


# ===== Checkpoints =====

def sidecar_path(path: str) -> Path:
    return Path(str(path) + SIDECAR_SUFFIX)


def save_model(model: PathRwkv, path: str) -> None:
    """
    Write weights in the PRWK layout plus a YAML sidecar with the model config.

    Regression target statistics are stored as `target_mean.<task>` / `target_std.<task>`.
    """
    tensors = {name: t for name, t in model.state_dict().items()}
    for name, (mean, std) in model.target_stats.items():
        tensors[f"target_mean.{name}"] = torch.tensor([mean])
        tensors[f"target_std.{name}"] = torch.tensor([std])
    save_tensors(path, tensors)
    with open(sidecar_path(path), "w", encoding="utf-8") as f:
        yaml.safe_dump({"model": model.config.to_dict()}, f, sort_keys=False)
    logger.info(f"Saved checkpoint {path} ({len(tensors)} entries)")


def load_model(path: str, dtype: Optional[torch.dtype] = None) -> PathRwkv:
    """
    Rebuild a model from a checkpoint and its sidecar.

    Raises:
        FormatError: Missing sidecar, missing/unknown entries or shape mismatch
    """
    meta_path = sidecar_path(path)
    if not meta_path.exists():
        raise FormatError(f"Checkpoint sidecar not found: {meta_path}")
    with open(meta_path, "r", encoding="utf-8") as f:
        meta = yaml.safe_load(f) or {}
    if "model" not in meta:
        raise FormatError(f"Checkpoint sidecar {meta_path} has no 'model' section")

    model = PathRwkv(ModelConfig.from_dict(meta["model"]))
    if dtype is not None:
        model.to(dtype)
    tensors = load_tensors(path)

    for name in list(model.target_stats):
        try:
            mean = tensors.pop(f"target_mean.{name}")
            std = tensors.pop(f"target_std.{name}")
        except KeyError:
            raise FormatError(f"Checkpoint lacks target statistics for task '{name}'") from None
        model.target_stats[name] = (float(mean.reshape(-1)[0]), float(std.reshape(-1)[0]))

    expected = model.state_dict()
    missing = sorted(set(expected) - set(tensors))
    unknown = sorted(set(tensors) - set(expected))
    if missing or unknown:
        raise FormatError(f"Checkpoint entries do not match the model: missing {missing}, unknown {unknown}")
    for name, tensor in tensors.items():
        if tuple(tensor.shape) != tuple(expected[name].shape):
            raise FormatError(
                f"Entry '{name}' has shape {tuple(tensor.shape)}, expected {tuple(expected[name].shape)}"
            )
    model.load_state_dict({name: t.to(expected[name].dtype) for name, t in tensors.items()})
    return model
