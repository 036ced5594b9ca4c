import json

import pytest

from vlmtrace.cli import EXIT_CONFIG, EXIT_STAGE, build_parser, main
from vlmtrace.pipeline import ConfigError, ExperimentConfig, load_config


def test_parser_knows_every_subcommand():
    p = build_parser()
    for cmd in ("pretrain", "forge", "finetune", "verify", "robust", "ablate", "report", "pipeline"):
        args = p.parse_args([cmd, "--seed", "3", "--threads", "1", "--format", "json"])
        assert args.command == cmd and args.seed == 3 and args.format == "json"
    assert p.parse_args(["forge", "--method", "pla", "--method", "rna"]).method == ["pla", "rna"]
    assert p.parse_args(["finetune", "--strategy", "lora"]).strategy == ["lora"]
    assert p.parse_args(["pipeline", "--check"]).check


def test_bad_method_is_a_usage_error():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["forge", "--method", "fgsm"])


def test_unknown_config_key_exits_with_config_error(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_imagez": 3}))
    assert main(["verify", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "n_imagez" in capsys.readouterr().err


def test_malformed_json_exits_with_config_error(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text("{not json")
    assert main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_invalid_values_exit_with_config_error(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"attacks": {"pla": {"beta": -1}}}))
    assert main(["forge", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_missing_upstream_artifacts_is_a_stage_failure(tmp_path, capsys):
    assert main(["verify", "--out", str(tmp_path / "empty")]) == EXIT_STAGE
    assert "pretrain" in capsys.readouterr().err


def test_out_defaults_to_env_root(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("VLMTRACE_OUT", str(tmp_path))
    assert main(["verify"]) == EXIT_STAGE
    assert (tmp_path / ExperimentConfig().hash()).is_dir()


def test_config_round_trip_and_hash(tmp_path):
    cfg = ExperimentConfig().with_seed(4)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = load_config(path)
    assert back == cfg and back.hash() == cfg.hash()
    assert cfg.hash() != ExperimentConfig().hash()
    snapshot = tmp_path / "snap.json"
    snapshot.write_text(json.dumps({"config": cfg.to_dict(), "config_hash": cfg.hash()}))
    assert load_config(snapshot) == cfg


def test_config_rejects_bad_suspects():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"suspects": [{"family": "poetry", "strategy": "full"}]})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"suspects": [{"family": "shape-naming", "strategy": "full"}] * 2})
