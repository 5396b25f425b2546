"""
Synthetic slides: an elliptical tissue region on dark glass, textured tissue
tiles and striped "witness" tiles whose count drives the slide labels.
"""
import bisect
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from path_rwkv.core.mtl_heads import TaskKind, TaskSpec
from path_rwkv.utils.errors import ConfigError, EmptySlideError

logger = logging.getLogger(__name__)

# Witness-count bucket edges of the tier task: 0 | 1-19 | 20-59 | 60+
TIER_EDGES = (1, 20, 60)

SYNTHETIC_TASKS: Dict[str, TaskSpec] = {
    "neoplasia": TaskSpec("neoplasia", TaskKind.CLASSIFICATION, 2),
    "tier": TaskSpec("tier", TaskKind.CLASSIFICATION, len(TIER_EDGES) + 1),
    "fraction": TaskSpec("fraction", TaskKind.REGRESSION),
    "opacity": TaskSpec("opacity", TaskKind.REGRESSION),
}

GLASS_LEVEL = 0.05
TISSUE_TEXTURE_SIGMA = 0.15
STRIPE_PERIOD = 4


def task_specs(names: Sequence[str]) -> list:
    """TaskSpecs of the synthetic suite, in the given order."""
    unknown = [n for n in names if n not in SYNTHETIC_TASKS]
    if unknown:
        raise ConfigError(f"Unknown synthetic task(s) {unknown}; available: {', '.join(SYNTHETIC_TASKS)}")
    return [SYNTHETIC_TASKS[n] for n in names]


@dataclass
class SyntheticSlideSpec:
    """
    Parameters of one synthetic slide.

    Attributes:
        grid_w, grid_h: Tile grid extents
        tile_px: Tile side in pixels
        witness_rate: Probability that a tissue tile is a witness tile
        noise_sigma: Gaussian noise on regression labels
        seed: Generator seed
        tissue_fill: Ellipse semi-axes as a fraction of the grid half-extents
        label_missing_rate: Probability of blanking each label
        tasks: Label columns to produce
    """

    grid_w: int = 48
    grid_h: int = 48
    tile_px: int = 16
    witness_rate: float = 0.05
    noise_sigma: float = 0.05
    seed: int = 0
    tissue_fill: float = 0.9
    label_missing_rate: float = 0.0
    tasks: Tuple[str, ...] = tuple(SYNTHETIC_TASKS)

    def validate(self) -> None:
        if self.grid_w * self.grid_h <= 0 or self.grid_w < 0 or self.grid_h < 0:
            raise EmptySlideError(f"Slide grid {self.grid_w}x{self.grid_h} has no tiles")
        if self.tile_px < 2:
            raise ConfigError("tile_px must be >= 2")
        if not 0.0 <= self.witness_rate <= 1.0:
            raise ConfigError(f"witness_rate must be in [0, 1], got {self.witness_rate}")
        if not 0.0 <= self.label_missing_rate < 1.0:
            raise ConfigError(f"label_missing_rate must be in [0, 1), got {self.label_missing_rate}")
        task_specs(self.tasks)


@dataclass
class SyntheticSlide:
    """Raw tiles and ground truth of one generated slide."""

    slide_id: str
    images: np.ndarray  # [N_raw, p, p] float32
    coords: np.ndarray  # [N_raw, 2] int32
    tissue: np.ndarray  # [N_raw] bool
    witness: np.ndarray  # [N_raw] bool
    labels: Dict[str, Optional[float]] = field(default_factory=dict)
    amplitude: float = 0.0

    @property
    def witness_count(self) -> int:
        return int(self.witness.sum())


def _tissue_mask(gx: np.ndarray, gy: np.ndarray, grid_w: int, grid_h: int, fill: float) -> np.ndarray:
    ux = ((gx + 0.5) / grid_w - 0.5) / (0.5 * fill)
    uy = ((gy + 0.5) / grid_h - 0.5) / (0.5 * fill)
    return ux ** 2 + uy ** 2 <= 1.0


def _stripes(tile_px: int) -> np.ndarray:
    phase = np.arange(tile_px) % STRIPE_PERIOD < STRIPE_PERIOD // 2
    return np.where(phase, 1.0, -1.0)[None, :].repeat(tile_px, axis=0)


def generate_slide(spec: SyntheticSlideSpec, slide_id: str = "slide") -> SyntheticSlide:
    """
    Generate tile images and labels for one slide.

    Glass tiles are dark and flat, tissue tiles are textured noise, witness tiles
    (drawn i.i.d. among tissue tiles with probability witness_rate) add a vertical
    stripe pattern of per-slide amplitude.

    Labels:
        neoplasia: 1 iff at least one witness tile
        tier: bucketed witness count (edges 1/20/60)
        fraction: witness fraction of tissue tiles + N(0, noise_sigma)
        opacity: stripe amplitude + N(0, noise_sigma); missing without witness tiles

    Raises:
        EmptySlideError: If the grid has no tiles
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    p = spec.tile_px
    n_raw = spec.grid_w * spec.grid_h

    gy, gx = np.divmod(np.arange(n_raw), spec.grid_w)
    coords = np.stack([gx, gy], axis=1).astype(np.int32)
    tissue = _tissue_mask(gx, gy, spec.grid_w, spec.grid_h, spec.tissue_fill)
    witness = tissue & (rng.random(n_raw) < spec.witness_rate)
    amplitude = float(rng.uniform(0.5, 1.0))

    images = GLASS_LEVEL + rng.normal(0.0, 0.01, size=(n_raw, p, p))
    base = rng.uniform(0.45, 0.6, size=(n_raw, 1, 1))
    texture = base + rng.normal(0.0, TISSUE_TEXTURE_SIGMA, size=(n_raw, p, p))
    images[tissue] = texture[tissue]
    images[witness] += 0.3 * amplitude * _stripes(p)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)

    n_tissue = max(int(tissue.sum()), 1)
    count = int(witness.sum())
    truth: Dict[str, Optional[float]] = {
        "neoplasia": float(count >= 1),
        "tier": float(bisect.bisect_right(TIER_EDGES, count)),
        "fraction": count / n_tissue + float(rng.normal(0.0, spec.noise_sigma)),
        "opacity": amplitude + float(rng.normal(0.0, spec.noise_sigma)) if count else None,
    }
    labels = {name: truth[name] for name in spec.tasks}

    if spec.label_missing_rate > 0:
        present = [name for name, v in labels.items() if v is not None]
        blank = [name for name in present if rng.random() < spec.label_missing_rate]
        if len(blank) == len(present):
            blank = blank[1:]
        for name in blank:
            labels[name] = None

    logger.debug(f"Generated {slide_id}: {int(tissue.sum())} tissue tiles, {count} witness tiles")
    return SyntheticSlide(
        slide_id=slide_id,
        images=images,
        coords=coords,
        tissue=tissue,
        witness=witness,
        labels=labels,
        amplitude=amplitude,
    )
