import json

import pytest

from path_rwkv.app import build_parser, main

SMALL = ["--set", "grid_w=8", "--set", "grid_h=8", "--set", "tile_px=8", "--set", "in_dim=16"]
TINY_MODEL = ["--set", "embed_dim=16", "--set", "n_heads=2", "--set", "depth=1", "--set", "lora_rank=4",
              "--set", "decay_rank=4", "--set", "batch_size=2", "--set", "tasks=neoplasia,fraction"]


@pytest.fixture
def workspace(tmp_path):
    return {"data": str(tmp_path / "data"), "out": str(tmp_path / "out"), "ckpt": str(tmp_path / "out" / "m.prwk")}


def test_unknown_command_exits_with_usage_code():
    with pytest.raises(SystemExit) as err:
        main(["explode"], environ={})
    assert err.value.code == 1


def test_parser_accepts_every_command():
    parser = build_parser()
    for command in ("gen", "train", "infer", "verify", "ablate", "bench"):
        assert parser.parse_args([command]).command == command


def test_zero_slides_is_usage_error(workspace):
    assert main(["gen", "--n-slides", "0", "--data-dir", workspace["data"]], environ={}) == 1


def test_bad_override_is_usage_error():
    assert main(["gen", "--set", "nonsense"], environ={}) == 1
    assert main(["gen", "--set", "colour=blue"], environ={}) == 1


def test_missing_dataset_is_data_error(workspace):
    assert main(["train", "--data-dir", workspace["data"], "--out-dir", workspace["out"]], environ={}) == 2


def test_gen_train_infer(workspace, capsys):
    common = ["--data-dir", workspace["data"], "--out-dir", workspace["out"], "--seed", "1"]
    assert main(["gen", "--n-slides", "10", *common, *SMALL], environ={}) == 0
    assert "manifest hash" in capsys.readouterr().out

    assert main(["gen", "--n-slides", "10", *common, *SMALL], environ={}) == 2

    train_args = ["train", "--epochs", "1", "--checkpoint", workspace["ckpt"], "--max-n-tiles", "16",
                  "--bag-size", "8", *common, *TINY_MODEL]
    assert main(train_args, environ={}) == 0
    capsys.readouterr()

    slide = f"{workspace['data']}/bags/slide_00000.prwk"
    assert main(["infer", "--checkpoint", workspace["ckpt"], "--slide", slide, "--out-dir", workspace["out"]],
                environ={}) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    record = json.loads(lines[-1])
    assert record["slide_id"] == "slide_00000"
    assert len(record["predictions"]["neoplasia"]) == 2
    assert sum(record["predictions"]["neoplasia"]) == pytest.approx(1.0)

    with open(f"{workspace['out']}/summary.jsonl", encoding="utf-8") as f:
        commands = [json.loads(line)["command"] for line in f]
    assert commands == ["gen", "train", "infer"]


def test_infer_without_slide_is_usage_error(workspace):
    assert main(["infer", "--checkpoint", workspace["ckpt"]], environ={}) == 1


def test_infer_missing_checkpoint_is_format_error(workspace, tmp_path):
    from path_rwkv.core.experiments import random_bag
    from path_rwkv.data.bag_format import write_bag
    slide = str(tmp_path / "s.prwk")
    write_bag(slide, random_bag(3, 4))
    assert main(["infer", "--checkpoint", workspace["ckpt"], "--slide", slide], environ={}) == 2


def test_bench_with_random_model(workspace):
    args = ["bench", "--out-dir", workspace["out"], "--checkpoint", workspace["ckpt"], "--bag-size", "16",
            "--set", "bench_n_grid=32,64", "--set", "in_dim=8", *TINY_MODEL]
    assert main(args, environ={}) == 0


def test_ablate_pe_writes_table(workspace, capsys):
    common = ["--data-dir", workspace["data"], "--out-dir", workspace["out"], "--seed", "2"]
    assert main(["gen", "--n-slides", "10", *common, *SMALL], environ={}) == 0
    args = ["ablate", "--axis", "pe", "--grid", "true,false", "--epochs", "1", "--max-n-tiles", "16",
            "--bag-size", "8", *common, *TINY_MODEL]
    assert main(args, environ={}) == 0
    capsys.readouterr()

    with open(f"{workspace['out']}/ablation_pe.tsv", encoding="utf-8") as f:
        rows = f.read().strip().splitlines()
    assert len(rows) == 3
    assert rows[1].startswith("W/PE") and rows[2].startswith("O/PE")


def test_ablate_unknown_axis_is_usage_error(workspace):
    common = ["--data-dir", workspace["data"], "--out-dir", workspace["out"]]
    assert main(["gen", "--n-slides", "4", *common, *SMALL], environ={}) == 0
    assert main(["ablate", "--axis", "colour", *common], environ={}) == 1
