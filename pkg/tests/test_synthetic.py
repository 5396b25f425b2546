import numpy as np
import pytest

from path_rwkv.data.synthetic import (
    SYNTHETIC_TASKS, TIER_EDGES, SyntheticSlideSpec, generate_slide, task_specs,
)
from path_rwkv.data.tiles import StubEmbedder, filter_tiles
from path_rwkv.utils.errors import ConfigError, EmptySlideError


def test_no_witness_slide_is_negative():
    slide = generate_slide(SyntheticSlideSpec(grid_w=16, grid_h=16, witness_rate=0.0, seed=1))
    assert slide.witness_count == 0
    assert slide.labels["neoplasia"] == 0.0
    assert slide.labels["tier"] == 0.0
    assert abs(slide.labels["fraction"]) < 0.3
    assert slide.labels["opacity"] is None


def test_all_witness_slide():
    slide = generate_slide(SyntheticSlideSpec(grid_w=16, grid_h=16, witness_rate=1.0, noise_sigma=0.0, seed=2))
    assert slide.witness_count == int(slide.tissue.sum())
    assert slide.labels["neoplasia"] == 1.0
    assert slide.labels["tier"] == float(len(TIER_EDGES))
    assert slide.labels["fraction"] == pytest.approx(1.0)
    assert slide.labels["opacity"] == pytest.approx(slide.amplitude)


def test_generation_is_deterministic():
    spec = SyntheticSlideSpec(grid_w=12, grid_h=12, witness_rate=0.2, seed=9)
    a, b = generate_slide(spec), generate_slide(spec)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.labels == b.labels


def test_witness_tiles_are_tissue_and_pass_filters():
    slide = generate_slide(SyntheticSlideSpec(grid_w=24, grid_h=24, witness_rate=0.3, seed=4))
    assert not (slide.witness & ~slide.tissue).any()
    kept = set(filter_tiles(slide.images).tolist())
    assert set(np.flatnonzero(slide.witness).tolist()) <= kept
    assert not kept & set(np.flatnonzero(~slide.tissue).tolist())


def test_missing_labels_never_blank_everything():
    for seed in range(20):
        spec = SyntheticSlideSpec(grid_w=8, grid_h=8, witness_rate=0.5, seed=seed, label_missing_rate=0.9)
        labels = generate_slide(spec).labels
        assert any(v is not None for v in labels.values())


def test_spec_errors():
    with pytest.raises(EmptySlideError):
        generate_slide(SyntheticSlideSpec(grid_w=0, grid_h=8))
    with pytest.raises(ConfigError):
        generate_slide(SyntheticSlideSpec(witness_rate=1.5))
    with pytest.raises(ConfigError):
        task_specs(["neoplasia", "grade"])
    assert [t.name for t in task_specs(["tier"])] == ["tier"]
    assert SYNTHETIC_TASKS["tier"].num_classes == 4


@pytest.mark.slow
def test_witness_embeddings_are_linearly_separable():
    from sklearn.linear_model import LogisticRegression

    images, targets = [], []
    for seed in range(4):
        slide = generate_slide(SyntheticSlideSpec(grid_w=24, grid_h=24, witness_rate=0.4, seed=seed))
        tissue = np.flatnonzero(slide.tissue)
        images.append(slide.images[tissue])
        targets.append(slide.witness[tissue])
    x = StubEmbedder(16, 384)(np.concatenate(images))[:1000]
    y = np.concatenate(targets)[:1000]
    classifier = LogisticRegression(max_iter=2000).fit(x, y)
    assert classifier.score(x, y) > 0.99
