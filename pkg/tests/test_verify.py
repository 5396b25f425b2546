import pytest
import torch

from path_rwkv.core.verify import (
    check_chunk_exactness, check_comb_laws, check_gradients, check_metric_oracles, check_step_equals_chunk,
    raise_on_failure, results_frame, run_verification,
)
from path_rwkv.utils.errors import PropertyFailure


@pytest.fixture(autouse=True)
def float64():
    torch.set_default_dtype(torch.float64)


def _mean(a, b):
    return (a + b) / 2


def test_comb_laws_hold():
    assert check_comb_laws(n_triples=100).passed


def test_mean_combine_is_caught():
    result = check_comb_laws(combine=_mean, n_triples=100, seed=3)
    assert not result.passed
    assert result.seed == 3


def test_metric_oracles():
    assert check_metric_oracles(n_cases=10).passed


def test_step_equals_chunk():
    result = check_step_equals_chunk(n=9)
    assert result.passed, result.detail


def test_chunk_exactness():
    result = check_chunk_exactness(n_models=1)
    assert result.passed, result.detail


@pytest.mark.slow
def test_gradients():
    result = check_gradients()
    assert result.passed, result.detail
    assert result.detail.endswith("5 tiles")


@pytest.mark.slow
def test_fast_suite_passes_and_restores_dtype():
    torch.set_default_dtype(torch.float32)
    results = run_verification("fast")
    assert torch.get_default_dtype() == torch.float32
    frame = results_frame(results)
    assert list(frame["name"]) == [
        "gradients", "chunk_exactness", "step_equals_chunk", "comb_laws", "variance_reduction", "metric_oracles",
    ]
    raise_on_failure(results)


def test_tampered_suite_raises():
    results = [check_comb_laws(combine=_mean, n_triples=10)]
    with pytest.raises(PropertyFailure) as err:
        raise_on_failure(results)
    assert err.value.exit_code == 4
