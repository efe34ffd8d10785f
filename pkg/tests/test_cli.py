import json
import logging

import numpy as np
import pytest

from core.cli import build_parser, main
from core.config import Config, load_model_config, load_run_config, parse_model_overrides
from core.meshgraph import save_trajectory
from core.sgunet import SgunetModel
from core.simgen import simulate_scenario
from core.transfer import Checkpoint
from utils.constants import MANIFEST_NAME
from utils.errors import ConfigurationError
from utils.types import ModelConfig, ScenarioSpec

TINY = ModelConfig(latent=4, hidden_layers=1, m_enc=1, m_gu=1, pooling_ratios=(2,))

SMALL = ScenarioSpec(
    nx=4, ny=2, height=0.5, indenter_radius=0.15,
    indenter_start=(0.5, 0.66), indenter_end=(0.5, 0.60), steps=3,
)


@pytest.fixture(autouse=True)
def quiet_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("SGUNET_LOG_TO_FILE", "false")
    monkeypatch.setenv("SGUNET_LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.setenv("SGUNET_DTYPE", "float32")
    monkeypatch.setenv("SGUNET_WORKERS", "1")
    yield
    for name in ("core", "utils"):
        logging.getLogger(name).handlers.clear()


@pytest.fixture
def tiny_checkpoint(tmp_path):
    path = tmp_path / "tiny.sgck"
    Checkpoint.from_model(SgunetModel.create(TINY, seed=0)).save(path)
    return path


def test_run_config_precedence(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"config": {"latent": 16}, "manifest": "m.json", "steps": 10, "lambda": 0.5}))
    run = load_run_config(path, {"steps": 5, "lambda_reg": 0.25, "lr": None, "config.m_gu": 3})
    assert run.steps == 5
    assert run.lambda_reg == 0.25
    assert run.config.latent == 16 and run.config.m_gu == 3
    assert load_run_config(path).lambda_reg == 0.5


def test_run_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"manifest": "m.json", "stepz": 10}))
    with pytest.raises(ConfigurationError, match="Invalid run configuration"):
        load_run_config(path)
    path.write_text("[1, 2]")
    with pytest.raises(ConfigurationError, match="JSON object"):
        load_run_config(path)


def test_model_config_from_run_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"config": {"latent": 4, "pooling_ratios": []}, "manifest": "m.json"}))
    assert load_model_config(path).baseline


def test_environment_is_validated(monkeypatch):
    monkeypatch.setenv("SGUNET_DTYPE", "float16")
    with pytest.raises(ConfigurationError, match="SGUNET_DTYPE"):
        Config()
    assert main(["gen", "--out", "unused", "--count", "0"]) == 2


def test_finetune_needs_a_source():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["finetune", "--config", "x.json"])


def test_model_fields_can_be_set_from_flags(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"config": {"latent": 16, "pooling_ratios": [2]}, "manifest": "m.json"}))
    args = build_parser().parse_args([
        "pretrain", "--config", str(path), "--set", "latent=32", "--set", "pooling_ratios=[4, 2]",
    ])
    overrides = parse_model_overrides(args.model_overrides)
    assert overrides == {"config.latent": 32, "config.pooling_ratios": [4, 2]}
    run = load_run_config(path, overrides)
    assert run.config.latent == 32
    assert run.config.pooling_ratios == (4, 2)
    assert load_run_config(path).config.latent == 16


def test_bad_model_flags_exit_with_config_code(tmp_path, capsys):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"manifest": "m.json"}))
    with pytest.raises(ConfigurationError, match="KEY=VALUE"):
        parse_model_overrides(["latent"])
    assert main(["pretrain", "--config", str(path), "--set", "latent"]) == 2
    assert main(["pretrain", "--config", str(path), "--set", "widht=3"]) == 2
    assert "error[config]" in capsys.readouterr().err


def test_missing_config_exits_with_config_code(tmp_path, capsys):
    assert main(["pretrain", "--config", str(tmp_path / "missing.json")]) == 2
    assert "error[config]" in capsys.readouterr().err


def test_bad_checkpoint_exits_with_structure_code(tmp_path, capsys):
    junk = tmp_path / "junk.sgck"
    junk.write_bytes(b"JUNK" + bytes(16))
    code = main(["rollout", "--checkpoint", str(junk), "--trajectory", "t.sgt", "--out", str(tmp_path / "p.npy")])
    assert code == 4
    assert "error[checkpoint]" in capsys.readouterr().err


def test_transplant_command(tmp_path, tiny_checkpoint, capsys):
    target = tmp_path / "target.json"
    target.write_text(json.dumps({"latent": 4, "hidden_layers": 1, "m_enc": 0, "m_gu": 2, "pooling_ratios": [2, 2]}))
    out = tmp_path / "moved.sgck"
    assert main(["transplant", "--source", str(tiny_checkpoint), "--config", str(target), "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    moved = Checkpoint.load(out)
    report = json.loads((tmp_path / "moved.report.json").read_text())
    assert len(report["entries"]) == len(moved.tensors)
    assert summary["copied"] + summary["averaged"] + summary["fresh"] == len(moved.tensors)
    assert summary["fresh"] > 0 and summary["copied"] > 0


def test_transplant_command_rejects_latent_change(tmp_path, tiny_checkpoint):
    target = tmp_path / "target.json"
    target.write_text(json.dumps({"latent": 8, "hidden_layers": 1}))
    code = main(["transplant", "--source", str(tiny_checkpoint), "--config", str(target), "--out", str(tmp_path / "o")])
    assert code == 2


def test_rollout_command(tmp_path, tiny_checkpoint, capsys):
    trajectory = simulate_scenario(SMALL)
    path = tmp_path / "t.sgt"
    save_trajectory(path, trajectory)
    out = tmp_path / "pred.npy"
    assert main(["rollout", "--checkpoint", str(tiny_checkpoint), "--trajectory", str(path), "--out", str(out)]) == 0
    assert np.load(out).shape == (len(trajectory) - 1, trajectory.num_nodes, 2)
    assert json.loads(capsys.readouterr().out)["steps"] == len(trajectory) - 1


def test_gen_then_eval(tmp_path, tiny_checkpoint, capsys):
    data = tmp_path / "data"
    assert main(["gen", "--family", "finetune", "--count", "3", "--seed", "1", "--out", str(data)]) == 0
    manifest = json.loads((data / MANIFEST_NAME).read_text())
    assert len(manifest["entries"]) == 3
    assert sorted(entry["split"] for entry in manifest["entries"]) == ["test", "train", "valid"]
    capsys.readouterr()

    plot = tmp_path / "plot.html"
    code = main(["eval", "--checkpoint", str(tiny_checkpoint), "--manifest", str(data), "--plot", str(plot)])
    assert code == 0
    result = json.loads(capsys.readouterr().out)
    assert result["trajectories"] == 1 and np.isfinite(result["rmse"])
    assert plot.exists()
