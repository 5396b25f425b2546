"""
Tile-level preprocessing: quality filters, stub embedder, positional embedding,
Morton ordering and tile sampling.
"""
import logging
from dataclasses import dataclass

import numpy as np

from path_rwkv.utils.errors import ConfigError, ContractError, EmptySlideError

logger = logging.getLogger(__name__)

TISSUE_SPLIT = 0.15


@dataclass
class TileBag:
    """
    One slide's tile features.

    Attributes:
        features: [N, D_in] float32
        coords: [N, 2] int32 grid coordinates (gx, gy), unique
        slide_id: Slide identifier
    """

    features: np.ndarray
    coords: np.ndarray
    slide_id: str = ""

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.coords = np.ascontiguousarray(self.coords, dtype=np.int32).reshape(-1, 2)
        if self.features.ndim != 2 or self.features.shape[0] != self.coords.shape[0]:
            raise ContractError(
                f"TileBag {self.slide_id!r}: features {self.features.shape} do not match coords {self.coords.shape}"
            )

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def in_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: np.ndarray) -> "TileBag":
        indices = np.asarray(indices, dtype=np.int64)
        return TileBag(self.features[indices], self.coords[indices], self.slide_id)


# ===== Filters =====

def tile_coverage(images: np.ndarray, tissue_split: float = TISSUE_SPLIT) -> np.ndarray:
    """Fraction of pixels brighter than the tissue split, per tile."""
    flat = images.reshape(images.shape[0], -1)
    return (flat > tissue_split).mean(axis=1)


def tile_variance(images: np.ndarray) -> np.ndarray:
    """Pixel intensity variance per tile."""
    return images.reshape(images.shape[0], -1).var(axis=1)


def filter_tiles(
    images: np.ndarray,
    coverage_thresh: float = 0.5,
    var_thresh: float = 0.01,
    tissue_split: float = TISSUE_SPLIT,
) -> np.ndarray:
    """
    Indices of tiles that pass the tissue-coverage and variance filters.

    A tile is dropped when its coverage is below `coverage_thresh` or its
    pixel variance is below `var_thresh`.

    Args:
        images: [N, p, p] pixel intensities in [0, 1]

    Raises:
        EmptySlideError: If no tile survives
    """
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise ContractError("filter_tiles expects pixel intensities in [0, 1]")
    keep = (tile_coverage(images, tissue_split) >= coverage_thresh) & (tile_variance(images) >= var_thresh)
    kept = np.flatnonzero(keep)
    if kept.size == 0:
        raise EmptySlideError(f"All {images.shape[0]} tiles were removed by the quality filters")
    logger.debug(f"filter_tiles kept {kept.size}/{images.shape[0]} tiles")
    return kept


# ===== Stub embedder =====

class StubEmbedder:
    """
    Deterministic stand-in for a tile foundation model.

    embed(tile) = tanh(flatten(tile) @ W + b) with W, b drawn from `seed`.
    """

    def __init__(self, tile_px: int = 16, out_dim: int = 384, seed: int = 1234, gain: float = 2.0):
        rng = np.random.default_rng(seed)
        n_pixels = tile_px * tile_px
        self.tile_px = tile_px
        self.out_dim = out_dim
        self.weight = (rng.standard_normal((n_pixels, out_dim)) * gain / np.sqrt(n_pixels)).astype(np.float32)
        self.bias = (rng.standard_normal(out_dim) * 0.5).astype(np.float32)

    def __call__(self, images: np.ndarray) -> np.ndarray:
        """[N, p, p] -> [N, out_dim] float32."""
        flat = np.asarray(images, dtype=np.float32).reshape(-1, self.tile_px * self.tile_px)
        return np.tanh(flat @ self.weight + self.bias).astype(np.float32)


def stub_embed(tile: np.ndarray, embedder: StubEmbedder) -> np.ndarray:
    """Embed a single p x p tile."""
    return embedder(tile[None])[0]


# ===== Positional embedding =====

def positional_embedding(coords: np.ndarray, dim: int, enabled: bool = True,
                         dtype: type = np.float32) -> np.ndarray:
    """
    2-D sinusoidal encoding of grid coordinates.

    Layout per row: [sin(gx*w), cos(gx*w), sin(gy*w), cos(gy*w)], each block dim/4 wide,
    with w_i = 10000^(-i/(dim/4)).

    Raises:
        ConfigError: If dim is not divisible by 4
    """
    if dim % 4:
        raise ConfigError(f"Positional embedding dim must be divisible by 4, got {dim}")
    coords = np.asarray(coords).reshape(-1, 2)
    if not enabled:
        return np.zeros((coords.shape[0], dim), dtype=dtype)
    quarter = dim // 4
    omega = 1.0 / (10000.0 ** (np.arange(quarter, dtype=np.float64) / quarter))
    gx = coords[:, :1].astype(np.float64) * omega
    gy = coords[:, 1:].astype(np.float64) * omega
    return np.concatenate([np.sin(gx), np.cos(gx), np.sin(gy), np.cos(gy)], axis=1).astype(dtype)


# ===== Ordering and sampling =====

def _spread_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0xFFFF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x00FF00FF)
    v = (v | (v << np.uint64(4))) & np.uint64(0x0F0F0F0F)
    v = (v | (v << np.uint64(2))) & np.uint64(0x33333333)
    v = (v | (v << np.uint64(1))) & np.uint64(0x55555555)
    return v


def morton_code(coords: np.ndarray) -> np.ndarray:
    """
    Z-order code: bits of gx on even positions, gy on odd positions.

    Examples:
        >>> morton_code(np.array([[0, 0], [1, 0], [0, 1], [1, 1]])).tolist()
        [0, 1, 2, 3]
    """
    coords = np.asarray(coords).reshape(-1, 2)
    if coords.size and (coords.min() < 0 or coords.max() > 0xFFFF):
        raise ContractError("morton_code supports grid coordinates in [0, 65535]")
    return _spread_bits(coords[:, 0]) | (_spread_bits(coords[:, 1]) << np.uint64(1))


def row_major_order(coords: np.ndarray) -> np.ndarray:
    """Permutation sorting tiles by (gy, gx)."""
    coords = np.asarray(coords).reshape(-1, 2)
    return np.lexsort((coords[:, 0], coords[:, 1]))


def sample_tiles(
    bag: TileBag,
    max_n: int = 2000,
    method: str = "random",
    seed: int = 0,
    z_order_mode: str = "contiguous",
) -> TileBag:
    """
    Choose at most `max_n` tiles from a bag.

    random:  uniform subset without replacement, shuffled
    z_order: tiles sorted by Morton code, then a contiguous run starting at a seeded
             offset ("strided" mode takes evenly spaced tiles from a seeded offset instead)

    Returns:
        A new TileBag with min(N, max_n) tiles
    """
    if max_n < 1:
        raise ContractError(f"max_n must be >= 1, got {max_n}")
    rng = np.random.default_rng(seed)
    n = len(bag)
    take = min(n, max_n)

    if method == "random":
        return bag.subset(rng.permutation(n)[:take])
    if method != "z_order":
        raise ConfigError(f"Unknown sampling method '{method}'")

    order = np.argsort(morton_code(bag.coords), kind="stable")
    if n <= max_n:
        return bag.subset(order)
    if z_order_mode == "contiguous":
        offset = int(rng.integers(0, n - max_n + 1))
        return bag.subset(order[offset:offset + max_n])
    if z_order_mode == "strided":
        stride = n / max_n
        offset = float(rng.uniform(0.0, stride))
        picks = np.minimum(np.floor(offset + np.arange(max_n) * stride).astype(np.int64), n - 1)
        return bag.subset(order[picks])
    raise ConfigError(f"Unknown z_order_mode '{z_order_mode}'")


def mean_neighbour_distance(coords: np.ndarray) -> float:
    """Average grid distance between consecutive tiles of a sequence."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    if coords.shape[0] < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(coords, axis=0), axis=1).mean())
