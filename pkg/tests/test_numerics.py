import math

import numpy as np
import pytest
import torch
from torch import nn

from path_rwkv.core.numerics import (
    LrSchedule, ParamStore, adam_step, backward, elementwise, gradient_check, load_tensors,
    lr_at, matmul, neg_exp_exp, relu_squared, save_tensors, set_precision,
)
from path_rwkv.utils.errors import ContractError, DimensionError, FormatError


def test_matmul_identity_and_projector():
    m = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert torch.equal(matmul(torch.eye(2), m), m)
    p = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
    assert torch.equal(matmul(p, torch.tensor([[5.0, 6.0], [7.0, 8.0]])), torch.tensor([[5.0, 6.0], [0.0, 0.0]]))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    expected = [[sum(a[i, k] * b[k, j] for k in range(4)) for j in range(2)] for i in range(3)]
    got = matmul(torch.tensor(a), torch.tensor(b)).numpy()
    np.testing.assert_allclose(got, expected, rtol=1e-6)


def test_matmul_rejects_mismatched_inner_extent():
    with pytest.raises(DimensionError):
        matmul(torch.zeros(2, 3), torch.zeros(2, 3))


def test_elementwise_values():
    assert relu_squared(torch.tensor(-2.0)).item() == 0.0
    assert relu_squared(torch.tensor(3.0)).item() == 9.0
    assert elementwise("sigmoid", torch.tensor(0.0)).item() == 0.5
    assert neg_exp_exp(torch.tensor(0.0)).item() == pytest.approx(math.exp(-1.0))


def test_elementwise_contract_errors():
    with pytest.raises(DimensionError):
        elementwise("add", torch.zeros(3), torch.zeros(4))
    with pytest.raises(ContractError):
        elementwise("mul", torch.zeros(3))
    with pytest.raises(ContractError):
        elementwise("cosh", torch.zeros(3))


def test_backward_linear_map_gradient():
    w = torch.zeros(2, 3, requires_grad=True)
    x = torch.tensor([1.0, 2.0, 3.0])
    backward((w @ x).sum())
    assert torch.equal(w.grad, x.repeat(2, 1))


def test_backward_requires_scalar_reachable_loss():
    w = torch.zeros(3, requires_grad=True)
    with pytest.raises(ContractError):
        backward(w * 2)
    with pytest.raises(ContractError):
        backward(w.detach().sum())


def test_first_adam_step_moves_by_lr_times_sign():
    layer = nn.Linear(1, 1, bias=False)
    with torch.no_grad():
        layer.weight.fill_(1.0)
    store = ParamStore(layer)
    backward((layer.weight * 3.0).sum())
    adam_step(store, lr=0.01)
    assert layer.weight.item() == pytest.approx(1.0 - 0.01, abs=1e-7)
    assert store.step_count == 1
    m, v = store.moments("weight")
    assert m.shape == layer.weight.shape and v.shape == layer.weight.shape


def test_adam_converges_on_square():
    theta = nn.Parameter(torch.tensor([1.0]))
    module = nn.Module()
    module.theta = theta
    store = ParamStore(module)
    for _ in range(100):
        backward((module.theta ** 2).sum())
        store.step(0.1)
    assert abs(module.theta.item()) < 1e-2


def test_parameters_without_gradient_are_skipped(caplog):
    model = nn.ModuleDict({"used": nn.Linear(2, 1), "unused": nn.Linear(2, 1)})
    before = model["unused"].weight.detach().clone()
    store = ParamStore(model)
    backward(model["used"](torch.ones(2)).sum())
    store.step(0.1)
    assert torch.equal(model["unused"].weight, before)
    assert "unused.weight" in caplog.text


def test_lr_schedule_shape():
    sched = LrSchedule(base_lr=1e-4, warmup_epochs=20, total_epochs=100)
    assert lr_at(sched, 0) == pytest.approx(1e-4 / 20)
    assert lr_at(sched, 19) == pytest.approx(1e-4)
    assert lr_at(sched, 20) == pytest.approx(1e-4)
    assert lr_at(sched, 99) == pytest.approx(1e-6)
    after = [lr_at(sched, e) for e in range(20, 100)]
    assert all(b <= a for a, b in zip(after, after[1:]))


def test_lr_schedule_without_cosine_span_ends_at_floor():
    sched = LrSchedule(base_lr=1.0, warmup_epochs=4, total_epochs=5)
    assert lr_at(sched, 4) == pytest.approx(0.01)


def test_lr_schedule_validation():
    with pytest.raises(ContractError):
        LrSchedule(1e-4, warmup_epochs=10, total_epochs=10)
    with pytest.raises(ContractError):
        LrSchedule(1e-4, 2, 10, floor_factor=0.0)
    with pytest.raises(ContractError):
        lr_at(LrSchedule(1e-4, 2, 10), 10)


def test_gradient_check_passes_on_small_module():
    set_precision("float64")
    torch.manual_seed(0)
    layer = nn.Sequential(nn.Linear(3, 4), nn.Tanh(), nn.Linear(4, 1))
    x = torch.randn(5, 3)
    results = gradient_check(layer, lambda call: (call(x) ** 2).sum())
    assert results and all(results.values())


def test_gradient_check_needs_float64():
    set_precision("float32")
    with pytest.raises(ContractError):
        gradient_check(nn.Linear(2, 1), lambda call: call(torch.ones(2)).sum())


def test_checkpoint_round_trip(tmp_path):
    tensors = {"a": torch.arange(6, dtype=torch.float32).reshape(2, 3), "b.c": torch.tensor([0.5])}
    path = tmp_path / "ckpt.prwk"
    save_tensors(str(path), tensors)
    loaded = load_tensors(str(path))
    assert set(loaded) == set(tensors)
    for name in tensors:
        assert torch.equal(loaded[name], tensors[name])


def test_checkpoint_rejects_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "ckpt.prwk"
    save_tensors(str(path), {"a": torch.ones(4)})
    data = path.read_bytes()

    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="offset 0"):
        load_tensors(str(path))

    path.write_bytes(data[:-3])
    with pytest.raises(FormatError):
        load_tensors(str(path))


def test_schedule_factor_is_relative_rate():
    sched = LrSchedule(base_lr=2e-4, warmup_epochs=4, total_epochs=10)
    assert sched.factor(0) == pytest.approx(0.25)
    assert sched.factor(9) == pytest.approx(0.01)
