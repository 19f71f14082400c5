import json
import sys
from pathlib import Path

import pytest

import config
from config import (
    RunConfig,
    apply_overrides,
    build_run_config,
    config_hash,
    load_run_config,
    resolve_data_root,
)
from errors import ConfigError


def test_defaults_cover_every_section():
    cfg = RunConfig()
    assert cfg.train.batch_size == 16
    assert cfg.train.epochs == 20
    assert cfg.train.lr == pytest.approx(1e-3)
    assert cfg.train.weight_decay == pytest.approx(5e-4)
    assert cfg.loss.eps == pytest.approx(1e-8)
    assert cfg.affordance.beta == pytest.approx(0.5)
    assert cfg.caption.template == "I will [action] [object]"
    assert cfg.metrics.topk == [1, 5]
    assert cfg.data.root is None


def test_overrides_parse_json_and_fall_back_to_strings():
    data = apply_overrides({}, ["train.epochs=3", "loss.weights.con=0", "data.root=/tmp/some where", "train.grad_clip=null"])
    assert data["train"]["epochs"] == 3
    assert data["loss"]["weights"]["con"] == 0
    assert data["data"]["root"] == "/tmp/some where"
    assert data["train"]["grad_clip"] is None


def test_override_without_equals_is_rejected():
    with pytest.raises(ConfigError):
        apply_overrides({}, ["train.epochs"])


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError):
        build_run_config({"train": {"epochz": 3}})


def test_text_and_multimodal_dims_must_match():
    with pytest.raises(ConfigError):
        build_run_config({"encoder": {"text": {"dim": 32}, "multimodal": {"dim": 16}}})


def test_beta_must_stay_below_one():
    with pytest.raises(ConfigError):
        build_run_config({"affordance": {"beta": 1.0}})


def test_toml_file_and_flags(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('[train]\nepochs = 7\nbatch_size = 4\n\n[loss]\nalpha = 0.2\n', encoding="utf-8")
    cfg = load_run_config(path, ["train.epochs=9"])
    assert cfg.train.epochs == 9
    assert cfg.train.batch_size == 4
    assert cfg.loss.alpha == pytest.approx(0.2)


def test_json_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"model": {"explain": {"variant": "ffn_softmax"}}}), encoding="utf-8")
    assert load_run_config(path).model.explain.variant == "ffn_softmax"


def test_missing_and_unsupported_files(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "absent.toml")
    bad = tmp_path / "run.yaml"
    bad.write_text("train: {}", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_run_config(bad)


def test_data_root_falls_back_to_environment(monkeypatch, tmp_path):
    monkeypatch.setattr(config.settings, "SEA_DATA_ROOT", str(tmp_path))
    assert resolve_data_root(RunConfig()) == tmp_path
    monkeypatch.setattr(config.settings, "SEA_DATA_ROOT", None)
    with pytest.raises(ConfigError):
        resolve_data_root(RunConfig())


def test_config_hash_is_stable_and_sensitive():
    a = build_run_config({"train": {"epochs": 3}})
    b = build_run_config({"train": {"epochs": 3}})
    c = build_run_config({"train": {"epochs": 4}})
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(c)
    assert len(config_hash(a)) == 10


def test_toml_support_matches_the_documented_python():
    # run files are parsed with tomllib, available from 3.11
    assert sys.version_info >= (3, 11)
    readme = (Path(__file__).resolve().parent.parent / "Readme.md").read_text(encoding="utf-8")
    assert "Python 3.11 or newer" in readme
