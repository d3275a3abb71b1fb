import json
from pathlib import Path

import pytest
import torch

from promptseg import cli, training
from promptseg.ablation import GRIDS
from promptseg.config import make_synth_config, make_train_config, read_flat, split_run_config
from promptseg.data import SynthConfig
from promptseg.model import ModelConfig
from promptseg.training import TrainConfig
from promptseg.metrics import EvalReport
from promptseg.refine import RefinementTrace

TINY_MODEL = """\
base_channels: 8
text_dim: 8
fusion_dim: 8
decoder_dim: 8
num_heads: 2
language_token_count: 4
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "data.yaml").write_text("train_size: 24\nval_size: 6\ntest_size: 0\nseed: 2\n")
    assert cli.main(["gen-data", str(root / "data.yaml"), str(root / "data")]) == 0
    (root / "run.yaml").write_text(TINY_MODEL + "epochs: 1\nbatch_size: 4\ndata: data\n")
    assert cli.main(["train", str(root / "run.yaml"), str(root / "run")]) == 0
    return root


def test_gen_data_layout(workspace):
    d = workspace / "data"
    assert (d / "train" / "manifest").exists() and (d / "val" / "manifest").exists()
    assert not (d / "test").exists()
    manifest = json.loads((d / "train" / "manifest").read_text())
    assert len(manifest["records"]) == 24 and manifest["provenance"]["config_hash"]
    assert (d / "config.yaml").exists()


def test_gen_data_is_byte_deterministic(workspace, tmp_path):
    assert cli.main(["gen-data", str(workspace / "data.yaml"), str(tmp_path / "again")]) == 0
    for f in (workspace / "data").rglob("*"):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "again" / f.relative_to(workspace / "data")).read_bytes()


def test_train_writes_run_dir(workspace):
    run = workspace / "run"
    for name in ("config.yaml", "model.ckpt", "run.json", "summary.txt", "metrics.tsv", "training.png"):
        assert (run / name).exists(), name
    echo = (run / "config.yaml").read_text()
    assert "betas" in echo and "base_channels: 8" in echo


@pytest.mark.parametrize("mode", ["robust", "oracle"])
def test_eval_writes_reports(workspace, mode, capsys):
    out = workspace / f"eval-{mode}"
    assert cli.main(["eval", str(workspace / "run" / "model.ckpt"), str(workspace / "data" / "val"),
                     "--mode", mode, "--out", str(out)]) == 0
    report = EvalReport.from_dict(json.loads((out / "report.json").read_text()))
    assert report.num_frames == 6
    header, row = (out / "metrics.tsv").read_text().splitlines()
    assert header.split("\t")[0] == "mode" and row.split("\t")[0] == mode
    traces = [RefinementTrace.from_json(x) for x in (out / "traces.jsonl").read_text().splitlines()]
    if mode == "oracle":
        assert report.fp == 0
        assert len(traces) == sum(len(json.loads(t.to_json())) > 0 for t in traces)
    else:
        assert len(traces) == 6 * 7
    assert "Ch IoU" in capsys.readouterr().out


def test_infer_outputs(workspace, capsys):
    frame = json.loads((workspace / "data" / "val" / "manifest").read_text())["records"][0]
    out = workspace / "infer"
    image = workspace / "data" / "val" / "images" / f"{frame}.ppm"
    assert cli.main(["infer", str(workspace / "run" / "model.ckpt"), str(image), "--out", str(out)]) == 0
    assert sorted(p.name for p in (out / "masks").iterdir()) == [f"{c}.pbm" for c in range(7)]
    assert (out / "overlay.png").stat().st_size > 0
    assert len((out / "trace.jsonl").read_text().splitlines()) == 7
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split("\t")[:3] == ["class_id", "name", "p1"] and len(lines) == 8


def test_report_command(workspace, tmp_path, capsys):
    assert cli.main(["report", str(workspace / "run"), "--out", str(tmp_path)]) == 0
    assert "validation at epoch 0" in capsys.readouterr().out
    assert (tmp_path / "variants.png").exists() and (tmp_path / "metrics.tsv").exists()


def test_ablate_prompt_grid(workspace, capsys):
    cfg = workspace / "ablate.yaml"
    cfg.write_text(TINY_MODEL + "epochs: 1\nbatch_size: 8\ngrid: prompt\nseeds: [0]\ndata: data\n"
                   f"cache_dir: {workspace / 'cache'}\n")
    assert cli.main(["ablate", str(cfg), str(workspace / "ablate")]) == 0
    rows = (workspace / "ablate" / "table.tsv").read_text().splitlines()
    assert len(rows) == 6 and rows[0].split("\t")[1:4] == ["isi_iou", "ch_iou", "mc_iou"]
    assert (workspace / "ablate" / "ablation.png").exists()
    assert "iterative refinement" in capsys.readouterr().out


def test_exit_code_config_error(workspace, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("epochs: 1\nwarp_speed: 9\ndata: x\n")
    assert cli.main(["train", str(bad), str(tmp_path / "r")]) == cli.EXIT_CONFIG
    bad.write_text("epochs: [1, [2]]\n")
    assert cli.main(["train", str(bad), str(tmp_path / "r")]) == cli.EXIT_CONFIG
    bad.write_text("epochs: -3\ndata: x\n")
    assert cli.main(["train", str(bad), str(tmp_path / "r")]) == cli.EXIT_CONFIG
    assert cli.main(["gen-data", str(tmp_path / "missing.yaml"), str(tmp_path / "d")]) == cli.EXIT_CONFIG


def test_exit_code_data_error(workspace, tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(TINY_MODEL + f"epochs: 1\ndata: {tmp_path / 'nowhere'}\n")
    assert cli.main(["train", str(cfg), str(tmp_path / "r")]) == cli.EXIT_DATA
    assert cli.main(["eval", str(tmp_path / "none.ckpt"), str(workspace / "data" / "val"),
                     "--out", str(tmp_path / "e")]) == cli.EXIT_DATA
    (tmp_path / "odd.ppm").write_bytes(b"P6\n40 40\n255\n" + bytes(40 * 40 * 3))
    assert cli.main(["infer", str(workspace / "run" / "model.ckpt"), str(tmp_path / "odd.ppm"),
                     "--out", str(tmp_path / "i")]) == cli.EXIT_DATA


def test_exit_code_divergence(workspace, tmp_path, monkeypatch):
    monkeypatch.setattr(training, "segmentation_loss", lambda *a, **k: torch.tensor(float("inf")))
    cfg = tmp_path / "run.yaml"
    cfg.write_text(TINY_MODEL + f"epochs: 1\ndata: {workspace / 'data'}\n")
    assert cli.main(["train", str(cfg), str(tmp_path / "r")]) == cli.EXIT_DIVERGED


def test_shipped_configs_are_valid():
    root = Path(__file__).resolve().parents[1] / "configs"
    data = read_flat(root / "data.yaml")
    sizes = {k: data.pop(k) for k in ("train_size", "val_size", "test_size")}
    data.pop("name")
    assert make_synth_config(data) == SynthConfig() and sizes["train_size"] == 1500
    model_kw, train_kw, other = split_run_config(read_flat(root / "train.yaml"), {"data"})
    assert make_train_config(train_kw) == TrainConfig()
    assert ModelConfig(vocab=("<pad>",), **model_kw).base_channels == ModelConfig().base_channels
    _, _, other = split_run_config(read_flat(root / "ablate.yaml"), {"data", "grid", "seeds", "cache_dir"})
    assert other["grid"] in GRIDS and other["seeds"] == [0, 1, 2]
