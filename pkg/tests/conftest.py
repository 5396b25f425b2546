"""
Shared fixtures: 64-bit tiny models, random tile bags and a small generated dataset.
"""
import sys
from pathlib import Path

import pytest
import torch

# Add src to path to import path_rwkv modules
project_root = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(project_root / "src"))

from path_rwkv.core.experiments import random_bag
from path_rwkv.core.verify import tiny_model
from path_rwkv.data.dataset import DatasetSpec, generate_dataset


@pytest.fixture(autouse=True)
def restore_default_dtype():
    previous = torch.get_default_dtype()
    yield
    torch.set_default_dtype(previous)


@pytest.fixture
def model64():
    """Perturbed 64-bit model, embed_dim 16, two tasks, max-tile readout."""
    return tiny_model(seed=7, embed_dim=16)


@pytest.fixture
def make_bag():
    def _make(n: int, in_dim: int = 6, seed: int = 0):
        return random_bag(n, in_dim, seed=seed)
    return _make


@pytest.fixture(scope="session")
def small_spec():
    return DatasetSpec(n_slides=12, grid_w=10, grid_h=10, tile_px=8, in_dim=24, witness_rate=0.1, seed=3)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, small_spec):
    root = tmp_path_factory.mktemp("dataset")
    return generate_dataset(str(root / "synthetic"), small_spec)
