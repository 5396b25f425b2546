import math

import pytest
import torch
from torch import nn

from path_rwkv.core.mtl_heads import (
    LabelSet, MtlProjection, TaskHead, TaskKind, TaskSpec, mtl_project, mtl_variant, select_max_tile,
    task_loss, total_loss,
)
from path_rwkv.core.verify import VERIFY_TASKS, tiny_model
from path_rwkv.utils.errors import ConfigError, ContractError, EmptySlideError

CLS4 = TaskSpec("tier", TaskKind.CLASSIFICATION, 4)
REG = TaskSpec("fraction", TaskKind.REGRESSION)


def test_task_spec_validation():
    assert CLS4.out_dim == 4 and CLS4.loss == "cross_entropy"
    assert REG.out_dim == 1 and REG.loss == "mean_absolute_error"
    assert TaskSpec.from_dict(CLS4.to_dict()) == CLS4
    with pytest.raises(ConfigError):
        TaskSpec("x", TaskKind.CLASSIFICATION, 1)
    with pytest.raises(ConfigError):
        TaskSpec("", TaskKind.REGRESSION)


def test_label_validation():
    LabelSet({"tier": 3.0}).validate([CLS4])
    with pytest.raises(ContractError):
        LabelSet({"tier": 4.0}).validate([CLS4])
    assert LabelSet({"tier": None, "fraction": 0.2}).present([CLS4, REG]) == [REG]


def test_mtl_project_splits_by_task():
    proj = nn.Linear(3, 6)
    parts = mtl_project(torch.randn(5, 3), proj, 2)
    assert len(parts) == 2 and all(p.shape == (5, 3) for p in parts)
    with pytest.raises(ContractError):
        mtl_project(torch.randn(5, 3), proj, 3)
    with pytest.raises(ContractError):
        MtlProjection(3, 0)


def test_select_max_tile():
    feats = torch.tensor([[1.0, 4.0], [2.0, 0.0]])
    assert torch.equal(select_max_tile(feats), torch.tensor([2.0, 4.0]))
    with pytest.raises(EmptySlideError):
        select_max_tile(torch.zeros(0, 2))


def test_uniform_logits_cross_entropy_is_log_k():
    loss = task_loss(torch.zeros(4), 2, CLS4)
    assert loss.item() == pytest.approx(math.log(4))


def test_regression_loss_is_absolute_error():
    assert task_loss(torch.tensor([0.25]), 1.0, REG).item() == pytest.approx(0.75)


def test_total_loss_masks_absent_tasks():
    head = TaskHead(3, CLS4)
    reg_head = TaskHead(3, REG)
    feat = torch.randn(3)
    preds = {"tier": head(feat), "fraction": reg_head(feat)}
    loss = total_loss(preds, LabelSet({"tier": 1.0, "fraction": None}), [CLS4, REG])
    loss.backward()
    assert head.linear.weight.grad.abs().sum() > 0
    assert reg_head.linear.weight.grad is None or reg_head.linear.weight.grad.abs().sum() == 0
    assert total_loss(preds, LabelSet({}), [CLS4, REG]) is None


@pytest.mark.parametrize("design", ["ours", "to", "through"])
def test_absent_task_gets_no_gradient_through_model(design, make_bag):
    model = tiny_model(seed=4, design=design)
    bag = make_bag(7)
    preds = model(bag.features, bag.coords)
    loss = total_loss(preds, LabelSet({"binary": 1.0, "value": None}), model.tasks)
    loss.backward()
    for p in model.heads["value"].parameters():
        assert p.grad is None or torch.count_nonzero(p.grad) == 0
    assert torch.count_nonzero(model.heads["binary"].linear.weight.grad) > 0
    if design == "ours":
        grad = model.readout.projection.linear.weight.grad
        dim = model.config.embed_dim
        assert torch.count_nonzero(grad[dim:]) == 0
        assert torch.count_nonzero(grad[:dim]) > 0


def test_total_loss_normalizes_regression_target():
    preds = {"fraction": torch.tensor([0.0])}
    loss = total_loss(preds, LabelSet({"fraction": 3.0}), [REG], {"fraction": (1.0, 2.0)})
    assert loss.item() == pytest.approx(1.0)


def test_unknown_design():
    with pytest.raises(ConfigError):
        mtl_variant("across", 8, [CLS4])


@pytest.mark.parametrize("design", ["ours", "to", "through"])
def test_designs_produce_every_head(design, make_bag):
    model = tiny_model(seed=2, design=design)
    preds = model(make_bag(5).features, make_bag(5).coords)
    assert set(preds) == {t.name for t in VERIFY_TASKS}
    assert preds["binary"].shape == (2,)
    assert preds["value"].shape == (1,)


def test_through_tokens_extend_the_sequence(make_bag):
    model = tiny_model(seed=3, design="through")
    with torch.no_grad():
        _, state = model.stream_features([make_bag(6)])
    assert state.tokens_seen == 6 + len(VERIFY_TASKS)


def test_mean_readout_shares_one_feature(make_bag):
    model = tiny_model(seed=4, design="to")
    bag = make_bag(4)
    with torch.no_grad():
        feats, state = model.stream_features([bag])
    assert torch.equal(feats["binary"], feats["value"])
    assert state.tokens_seen == 4


def test_max_tile_readout_matches_projection_then_max():
    from path_rwkv.core.mtl_heads import MaxTileReadout
    torch.manual_seed(5)
    readout = MaxTileReadout(8, [CLS4, REG])
    hidden = torch.randn(6, 8)
    acc = readout.start(hidden)
    readout.absorb(acc, hidden[:2])
    readout.absorb(acc, hidden[2:])
    feats = readout.finish(acc)
    expected = mtl_project(hidden, readout.projection.linear, 2)
    assert torch.equal(feats["tier"], select_max_tile(expected[0]))
    assert torch.equal(feats["fraction"], select_max_tile(expected[1]))


def test_zero_head_gives_uniform_probabilities_and_constant_value():
    head = TaskHead(5, CLS4)
    reg = TaskHead(5, REG)
    with torch.no_grad():
        head.linear.weight.zero_()
        head.linear.bias.zero_()
        reg.linear.weight.zero_()
        reg.linear.bias.fill_(0.7)
    feat = torch.randn(5)
    assert torch.allclose(torch.softmax(head(feat), dim=0), torch.full((4,), 0.25))
    assert reg(feat).item() == pytest.approx(0.7)


def test_head_forward_checks_task():
    from path_rwkv.core.mtl_heads import head_forward
    head = TaskHead(3, CLS4)
    feat = torch.randn(3)
    assert torch.equal(head_forward(feat, CLS4, head), head(feat))
    with pytest.raises(ContractError):
        head_forward(feat, REG, head)
