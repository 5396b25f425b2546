import math

import pytest
import torch

from path_rwkv.core.experiments import (
    AblationData, bench_scaling, gradient_bias_experiment, loglog_slope, mtl_groupings,
    quadratic_attention_reference, random_bag, row_label, run_ablation,
)
from path_rwkv.core.verify import tiny_model
from path_rwkv.utils.config_loader import RunConfig
from path_rwkv.utils.errors import ConfigError

TASKS = ["neoplasia", "tier", "fraction", "opacity"]


def test_mtl_groupings_rows():
    rows = mtl_groupings(TASKS)
    labels = [label for label, _ in rows]
    assert labels == ["STL", "MTL-NT", "MTL-NF", "MTL-NO", "MTL-NTF", "MTL-NTO", "MTL-NFO", "MTL-TFO", "MTL-All"]
    groups = dict(rows)
    assert groups["STL"] == [[t] for t in TASKS]
    assert groups["MTL-NT"] == [["neoplasia", "tier"], ["fraction", "opacity"]]
    assert groups["MTL-NTF"] == [["neoplasia", "tier", "fraction"], ["opacity"]]
    assert groups["MTL-All"] == [TASKS]
    for _, row_groups in rows:
        assert sorted(t for g in row_groups for t in g) == sorted(TASKS)


def test_mtl_groupings_two_tasks():
    assert [label for label, _ in mtl_groupings(["neoplasia", "fraction"])] == ["STL", "MTL-All"]
    with pytest.raises(ConfigError):
        mtl_groupings([])


def test_row_labels():
    assert row_label("pe", True) == "W/PE"
    assert row_label("pe", False) == "O/PE"
    assert row_label("sampling", "z_order") == "Sample Z-Order"
    assert row_label("structure", "recurrent") == "Structure Recurrent"
    assert row_label("max_n_tiles", 2000) == "Max-N-Tiles 2000"
    assert row_label("mtl_design", "ours") == "MTL-Ours"
    assert row_label("dim", 1024) == "D-1024"


def _ablation_config(**overrides) -> RunConfig:
    values = dict(epochs=1, warmup_epochs=0, embed_dim=16, n_heads=2, depth=1, lora_rank=4, decay_rank=4,
                  in_dim=24, max_n_tiles=16, bag_size=8, precision="float64", batch_size=2,
                  tasks=["neoplasia", "fraction"])
    values.update(overrides)
    return RunConfig.from_mapping(values)


@pytest.fixture
def ablation_data(small_dataset):
    return AblationData(*small_dataset.split(seed=0))


def test_pe_ablation_has_two_rows(ablation_data):
    table = run_ablation("pe", [], _ablation_config(), ablation_data)
    assert list(table["setting"]) == ["O/PE", "W/PE"]
    assert {"neoplasia.acc", "neoplasia.auc", "fraction.corr"} <= set(table.columns)


def test_single_value_grid_gives_one_row(ablation_data):
    table = run_ablation("structure", ["recurrent"], _ablation_config(), ablation_data)
    assert list(table["setting"]) == ["Structure Recurrent"]


def test_ablation_errors(ablation_data):
    with pytest.raises(ConfigError):
        run_ablation("optimizer", [], _ablation_config(), ablation_data)
    with pytest.raises(ConfigError):
        run_ablation("sampling", ["hilbert"], _ablation_config(), ablation_data)


def test_quadratic_reference_block_invariance():
    x = torch.randn(50, 4, dtype=torch.float64)
    assert torch.allclose(quadratic_attention_reference(x, block=7), quadratic_attention_reference(x, block=64))


def test_loglog_slope():
    assert loglog_slope([1, 2, 4, 8], [3, 12, 48, 192]) == pytest.approx(2.0)
    assert math.isnan(loglog_slope([1], [1]))


def test_bench_rows_and_flat_memory():
    model = tiny_model(seed=0, embed_dim=16)
    report = bench_scaling(model, [64, 128, 256], bag_size=32)
    assert list(report.table["n_tiles"]) == [64, 128, 256]
    assert {"recurrent_s", "reference_s", "peak_activation_bytes"} <= set(report.table.columns)
    assert report.memory_spread == 0.0
    with pytest.raises(ConfigError):
        bench_scaling(model, [128, 64])


def test_random_bag_coords_are_unique():
    bag = random_bag(10, 3, seed=1)
    assert len({tuple(c) for c in bag.coords.tolist()}) == 10


@pytest.mark.slow
def test_averaged_sampled_gradient_converges():
    report = gradient_bias_experiment(trial_counts=(100, 1000), repeats=10)
    assert -0.8 <= report.slope <= -0.2
    assert report.errors[1] < report.errors[0]


def test_baseline_axis_rows(ablation_data):
    table = run_ablation("baseline", [], _ablation_config(), ablation_data)
    assert list(table["setting"]) == ["SlideAve", "SlideMax"]
    assert "fraction.corr" in table.columns


def test_mtl_all_trains_once_and_reports_every_task(small_dataset, monkeypatch):
    import path_rwkv.core.experiments as experiments

    calls = []
    real_train = experiments.train

    def counting_train(*args, **kwargs):
        calls.append(args[1].tasks)
        return real_train(*args, **kwargs)

    monkeypatch.setattr(experiments, "train", counting_train)
    data = AblationData(train=small_dataset, val=None, test=small_dataset)
    table = run_ablation("mtl_grouping", ["MTL-All"], _ablation_config(tasks=TASKS), data)

    assert list(table["setting"]) == ["MTL-All"]
    assert len(calls) == 1
    assert [t.name for t in calls[0]] == TASKS
    assert {"neoplasia.acc", "neoplasia.auc", "tier.acc", "tier.auc", "fraction.corr", "opacity.corr"} <= set(table.columns)
