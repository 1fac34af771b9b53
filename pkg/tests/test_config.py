import dataclasses
from pathlib import Path

import pytest

from bislu.config import ConfigError, config_from_dict, config_to_dict, format_config, load_config, parse_config
from bislu.losses import LossWeights
from bislu.training import TrainConfig

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_default_round_trip():
    cfg = TrainConfig()
    assert config_to_dict(parse_config(format_config(cfg))) == config_to_dict(cfg)


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.ini")), ids=lambda p: p.name)
def test_shipped_configs_load_and_round_trip(path):
    cfg = load_config(path)
    assert format_config(cfg) == path.read_text()


def test_partial_file_uses_defaults():
    cfg = parse_config("[train]\nlr = 0.01\n[encoder]\nd = 32\n")
    assert cfg.lr == 0.01 and cfg.model.encoder.d == 32
    assert cfg.batch_size == TrainConfig().batch_size


def test_nulls_and_lists():
    cfg = parse_config("[train]\nclip_norm = null\nbetas = [0.8, 0.99]\n")
    assert cfg.clip_norm is None and cfg.betas == (0.8, 0.99)


def test_loss_weights_renormalized_when_off_simplex():
    cfg = parse_config("[loss_weights]\nlambda1 = 2\nlambda2 = 2\nlambda3 = 0\nlambda4 = 0\nlambda5 = 0\n")
    assert dataclasses.astuple(cfg.loss_weights) == (0.5, 0.5, 0.0, 0.0, 0.0)


def test_normalized_weights_pass_through_bit_exact():
    w = LossWeights.normalized(.3, .3, .15, .15, .1)
    cfg = TrainConfig(loss_weights=w)
    assert parse_config(format_config(cfg)).loss_weights == w


@pytest.mark.parametrize("text, needle", [
    ("[train]\nlearning_rate = 0.1\n", "learning_rate"),
    ("[optim]\nlr = 0.1\n", "optim"),
    ("[encoder]\nmodel = 3\n", "model"),
    ("[train]\nlr = -1\n", "lr"),
    ("[encoder]\nd = 10\nheads = 3\n", "divisible"),
    ("[train]\nlr 0.1\n", "line  2"),
])
def test_bad_configs(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(text, "bad.ini")


def test_unknown_key_error_lists_allowed():
    with pytest.raises(ConfigError) as info:
        config_from_dict({"train": {"lrr": 1}})
    assert "allowed" in str(info.value) and "'lr'" in str(info.value)


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        load_config("/nonexistent/x.ini")


def test_overfit_ini_matches_benchmark_config():
    from bislu.experiments import overfit_config
    assert load_config(CONFIGS / "overfit.ini") == overfit_config()
