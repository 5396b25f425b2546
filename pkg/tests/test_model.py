import numpy as np
import pytest
import torch

from path_rwkv.core.model import ModelConfig, PathRwkv, build_model, load_model, save_model, sidecar_path
from path_rwkv.core.verify import VERIFY_TASKS, tiny_model
from path_rwkv.utils.errors import ConfigError, EmptySlideError, FormatError


def test_config_validation():
    with pytest.raises(ConfigError):
        PathRwkv(ModelConfig(embed_dim=10, tasks=list(VERIFY_TASKS)))
    with pytest.raises(ConfigError):
        PathRwkv(ModelConfig(mtl_design="across", tasks=list(VERIFY_TASKS)))
    with pytest.raises(ConfigError):
        PathRwkv(ModelConfig(tasks=[]))
    assert ModelConfig(embed_dim=128).heads == 2
    assert ModelConfig(embed_dim=32).heads == 1


def test_config_dict_round_trip():
    config = ModelConfig(in_dim=6, embed_dim=8, tasks=list(VERIFY_TASKS))
    assert ModelConfig.from_dict(config.to_dict()) == config


def test_build_is_seeded():
    config = ModelConfig(in_dim=6, embed_dim=8, depth=1, lora_rank=2, decay_rank=2, tasks=list(VERIFY_TASKS))
    a, b = build_model(config, seed=3), build_model(config, seed=3)
    for (name, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(pa, pb), name


def test_forward_equals_stream_over_chunks(model64, make_bag):
    bag = make_bag(11)
    with torch.no_grad():
        whole = model64(bag.features, bag.coords)
        feats, state = model64.stream_features([bag.subset(np.arange(5)), bag.subset(np.arange(5, 11))])
        streamed = model64.heads_forward(feats)
    assert state.tokens_seen == 11
    for name in whole:
        assert torch.allclose(whole[name], streamed[name], atol=1e-10)


def test_empty_chunks_are_skipped(model64, make_bag, caplog):
    bag = make_bag(4)
    with torch.no_grad():
        feats, _ = model64.stream_features([bag.subset(np.arange(0)), bag])
        reference = model64(bag.features, bag.coords)
    assert torch.allclose(model64.heads_forward(feats)["binary"], reference["binary"])
    assert "no tiles" in caplog.text
    with pytest.raises(EmptySlideError):
        model64.stream_features([bag.subset(np.arange(0))])


def test_embed_rejects_wrong_width(model64):
    with pytest.raises(FormatError):
        model64.embed(np.zeros((3, 5)), np.zeros((3, 2)))


def test_decode(model64, make_bag):
    model64.target_stats["value"] = (2.0, 0.5)
    bag = make_bag(3)
    with torch.no_grad():
        preds = model64(bag.features, bag.coords)
    decoded = model64.decode(preds)
    assert sum(decoded["binary"]) == pytest.approx(1.0)
    assert decoded["value"] == pytest.approx(float(preds["value"]) * 0.5 + 2.0)


def test_checkpoint_round_trip(tmp_path, make_bag):
    model = tiny_model(seed=4, design="through")
    model.target_stats["value"] = (1.5, 2.0)
    path = str(tmp_path / "ckpt.prwk")
    save_model(model, path)
    assert sidecar_path(path).exists()

    loaded = load_model(path, dtype=torch.float64)
    assert loaded.config == model.config
    assert loaded.target_stats["value"] == (1.5, 2.0)
    bag = make_bag(5)
    with torch.no_grad():
        a = model(bag.features, bag.coords)
        b = loaded(bag.features, bag.coords)
    for name in a:
        assert torch.allclose(a[name], b[name], atol=1e-4)


def test_checkpoint_errors(tmp_path):
    model = tiny_model(seed=5)
    path = str(tmp_path / "ckpt.prwk")
    save_model(model, path)

    sidecar = sidecar_path(path)
    text = sidecar.read_text()
    sidecar.write_text(text.replace("embed_dim: 8", "embed_dim: 16"))
    with pytest.raises(FormatError):
        load_model(path)

    sidecar.unlink()
    with pytest.raises(FormatError):
        load_model(path)
