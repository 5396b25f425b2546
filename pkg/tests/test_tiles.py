import numpy as np
import pytest

from path_rwkv.data.tiles import (
    StubEmbedder, TileBag, filter_tiles, mean_neighbour_distance, morton_code, positional_embedding,
    row_major_order, sample_tiles, stub_embed, tile_coverage,
)
from path_rwkv.utils.errors import ConfigError, ContractError, EmptySlideError


def _tile(covered: float, low: float = 0.3, high: float = 0.7, px: int = 10) -> np.ndarray:
    """Tissue tile: `covered` share of pixels above the tissue split, alternating two levels."""
    tile = np.full(px * px, 0.05)
    n = int(round(covered * px * px))
    tile[:n] = np.where(np.arange(n) % 2 == 0, low, high)
    return tile.reshape(px, px)


def test_filter_examples():
    uniform = np.full((10, 10), 0.6)
    sparse = _tile(0.4)
    textured = _tile(1.0)
    kept = filter_tiles(np.stack([uniform, sparse, textured]))
    assert kept.tolist() == [2]


def test_coverage_060_with_enough_variance_is_kept():
    rng = np.random.default_rng(0)
    tile = np.full(100, 0.05)
    tile[:60] = 0.4 + 0.05 * rng.standard_normal(60).clip(-1, 1)
    tile = tile.reshape(10, 10)
    assert tile_coverage(tile[None])[0] == pytest.approx(0.6)
    assert tile.var() >= 0.01
    assert filter_tiles(tile[None]).tolist() == [0]


def test_filter_is_idempotent():
    from path_rwkv.data.synthetic import SyntheticSlideSpec, generate_slide
    slide = generate_slide(SyntheticSlideSpec(grid_w=16, grid_h=16, tile_px=8, witness_rate=0.2, seed=5))
    kept = filter_tiles(slide.images)
    assert 0 < kept.size < slide.images.shape[0]
    assert filter_tiles(slide.images[kept]).tolist() == list(range(kept.size))


def test_filter_errors():
    with pytest.raises(EmptySlideError):
        filter_tiles(np.zeros((3, 4, 4)))
    with pytest.raises(ContractError):
        filter_tiles(np.full((1, 4, 4), 1.5))


def test_stub_embedder_is_deterministic():
    embedder = StubEmbedder(tile_px=4, out_dim=8, seed=1)
    zero = stub_embed(np.zeros((4, 4)), embedder)
    np.testing.assert_allclose(zero, np.tanh(embedder.bias), rtol=1e-6)
    tile = np.random.default_rng(0).random((4, 4))
    np.testing.assert_array_equal(stub_embed(tile, embedder), stub_embed(tile, embedder))
    other = StubEmbedder(tile_px=4, out_dim=8, seed=1)
    np.testing.assert_array_equal(other.weight, embedder.weight)


def test_positional_embedding_origin():
    pe = positional_embedding(np.array([[0, 0]]), 16)
    assert pe.shape == (1, 16)
    np.testing.assert_array_equal(pe[0, 0:4], 0.0)
    np.testing.assert_array_equal(pe[0, 4:8], 1.0)
    np.testing.assert_array_equal(pe[0, 8:12], 0.0)
    np.testing.assert_array_equal(pe[0, 12:16], 1.0)


def test_positional_embedding_has_no_collisions_on_grid():
    gx, gy = np.meshgrid(np.arange(64), np.arange(64))
    coords = np.stack([gx.ravel(), gy.ravel()], axis=1)
    pe = positional_embedding(coords, 32, dtype=np.float64)
    assert np.unique(pe.round(12), axis=0).shape[0] == 64 * 64


def test_positional_embedding_disabled_and_bad_dim():
    assert not positional_embedding(np.array([[3, 4]]), 8, enabled=False).any()
    with pytest.raises(ConfigError):
        positional_embedding(np.array([[0, 0]]), 10)


def test_morton_code():
    assert morton_code(np.array([[0, 0], [1, 0], [0, 1], [1, 1]])).tolist() == [0, 1, 2, 3]
    assert morton_code(np.array([[2, 0]])).tolist() == [4]
    with pytest.raises(ContractError):
        morton_code(np.array([[-1, 0]]))


def test_row_major_order():
    coords = np.array([[1, 1], [0, 1], [1, 0], [0, 0]])
    assert row_major_order(coords).tolist() == [3, 2, 1, 0]


def _grid_bag(side: int) -> TileBag:
    gx, gy = np.meshgrid(np.arange(side), np.arange(side))
    coords = np.stack([gx.ravel(), gy.ravel()], axis=1)
    return TileBag(np.arange(side * side, dtype=np.float32)[:, None], coords, "grid")


def test_small_bag_z_order_is_full_morton_sort():
    bag = _grid_bag(4)
    sampled = sample_tiles(bag, max_n=100, method="z_order")
    assert len(sampled) == 16
    codes = morton_code(sampled.coords)
    assert np.all(np.diff(codes.astype(np.int64)) > 0)


def test_random_sampling_is_reproducible():
    bag = _grid_bag(10)
    a = sample_tiles(bag, max_n=20, method="random", seed=5)
    b = sample_tiles(bag, max_n=20, method="random", seed=5)
    np.testing.assert_array_equal(a.coords, b.coords)
    assert len(a) == 20
    assert len(np.unique(a.features)) == 20


def test_z_order_sample_is_spatially_local():
    bag = _grid_bag(32)
    z = sample_tiles(bag, max_n=64, method="z_order", seed=1)
    r = sample_tiles(bag, max_n=64, method="random", seed=1)
    assert mean_neighbour_distance(z.coords) < mean_neighbour_distance(r.coords)


def test_strided_z_order_spans_the_slide():
    bag = _grid_bag(16)
    strided = sample_tiles(bag, max_n=16, method="z_order", seed=2, z_order_mode="strided")
    assert len(strided) == 16
    assert len(np.unique(strided.features)) == 16


def test_sampling_errors():
    bag = _grid_bag(2)
    with pytest.raises(ConfigError):
        sample_tiles(bag, method="hilbert")
    with pytest.raises(ConfigError):
        sample_tiles(_grid_bag(4), max_n=2, method="z_order", z_order_mode="spiral")
    with pytest.raises(ContractError):
        sample_tiles(bag, max_n=0)


def test_tile_bag_shape_check():
    with pytest.raises(ContractError):
        TileBag(np.zeros((3, 4)), np.zeros((2, 2)))
