import json
import subprocess
import sys

import pytest

from mclora.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_USAGE, main
from mclora.config import Config, from_dict, load_config, parse_assignment
from mclora.errors import ConfigError

FAST = ["--set", "model.pretrain_steps=50", "--set", "task.pretrain_samples=400", "--set", "task.n_val=200",
        "--steps", "10"]


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text("")
    cfg = load_config(path, env={})
    assert cfg == Config()
    assert (cfg.mixture.epsilon, cfg.mixture.kl_weight, cfg.mixture.n_components, cfg.mixture.alpha_init) == (
        5e-3, 1e-5, 4, "ones")


def test_flag_overrides_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"mixture": {"epsilon": 0.02}}))
    assert load_config(path, env={}).mixture.epsilon == 0.02
    assert load_config(path, {"mixture.epsilon": 0.0}, env={}).mixture.epsilon == 0.0


def test_seed_precedence(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 1}))
    assert load_config(path, env={"MCLORA_SEED": "2"}).seed == 2
    assert load_config(path, {"seed": 3}, env={"MCLORA_SEED": "2"}).seed == 3


def test_unknown_key_is_named():
    with pytest.raises(ConfigError) as info:
        from_dict({"mixture": {"epsilonn": 0.1}})
    assert "epsilonn" in str(info.value) and info.value.key == "mixture.epsilonn"


def test_type_mismatch_is_named():
    with pytest.raises(ConfigError) as info:
        from_dict({"train": {"steps": "many"}})
    assert info.value.key == "train.steps"


def test_canonical_json_roundtrip():
    cfg = from_dict({"seed": 4, "mixture": {"epsilon": 0.01}, "sweep": {"seeds": [1, 2]}})
    assert from_dict(json.loads(cfg.canonical_json())) == cfg


def test_parse_assignment():
    assert parse_assignment("task.shift=0.5") == ("task.shift", 0.5)
    assert parse_assignment("strategy=lora") == ("strategy", "lora")
    with pytest.raises(ConfigError):
        parse_assignment("novalue")


def test_cli_config_error(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"mixture": {"epsilonn": 0.1}}))
    code = main(["train", "--config", str(path), "--out", str(tmp_path / "o")])
    err = capsys.readouterr().err
    assert code == EXIT_CONFIG
    assert err.startswith("error kind=config key=mixture.epsilonn")


def test_cli_io_error(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == EXIT_IO
    assert "kind=io" in capsys.readouterr().err


def test_cli_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["launch"])
    assert info.value.code == EXIT_USAGE


def test_train_twice_is_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["train", "--out", str(tmp_path / name), *FAST]) == EXIT_OK
    assert (tmp_path / "a" / "record.json").read_bytes() == (tmp_path / "b" / "record.json").read_bytes()
    resolved = json.loads((tmp_path / "a" / "resolved-config.json").read_text())
    assert resolved["train"]["steps"] == 10
    assert (tmp_path / "a" / "adapters.npz").exists()


def test_resolved_config_reproduces_run(tmp_path):
    assert main(["train", "--out", str(tmp_path / "a"), *FAST, "--epsilon", "0.01"]) == EXIT_OK
    assert main(["train", "--config", str(tmp_path / "a" / "resolved-config.json"), "--out",
                 str(tmp_path / "b")]) == EXIT_OK
    assert (tmp_path / "a" / "record.json").read_bytes() == (tmp_path / "b" / "record.json").read_bytes()


def test_sweep_twice_skips_everything(tmp_path, capsys):
    args = ["sweep", "--out", str(tmp_path), "--jobs", "1", "--no-plots", *FAST,
            "--set", "sweep.learning_rates=[0.3]", "--set", "sweep.batch_sizes=[16]", "--set", "sweep.seeds=[0,1]"]
    assert main(args) == EXIT_OK
    assert "trained=4 skipped=0" in capsys.readouterr().out
    assert main(args) == EXIT_OK
    assert "trained=0 skipped=4" in capsys.readouterr().out
    assert (tmp_path / "runs.csv").exists() and (tmp_path / "report.txt").exists()


def test_verify_subcommand(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mclora", "verify", "--quick", "--out", str(tmp_path)],
                          capture_output=True, text=True, timeout=600)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    lines = proc.stdout.strip().splitlines()
    assert all(line.startswith("PASS") for line in lines[:-1])
    assert lines[-1].startswith("verify status=ok")
