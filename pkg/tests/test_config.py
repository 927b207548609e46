import configparser

import pytest

from dyngate.config import FIELDS, default_config_text, load_config
from dyngate.errors import ParseError, ValidationError


def write(tmp_path, text):
    p = tmp_path / "run.cfg"
    p.write_text(text)
    return p


def test_every_field_documented_and_default_parses(tmp_path):
    assert all(f.doc for f in FIELDS)
    cfg = load_config(write(tmp_path, default_config_text()), env={})
    assert cfg.seed == 0
    assert cfg["network.widths"] == (16, 32, 64, 128)
    assert cfg.train_config().learning_rate == 0.001


def test_default_text_is_plain_ini():
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(default_config_text())
    assert set(cp.sections()) == {"data", "train", "schedule", "network"}


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ValidationError, match="train.learnrate"):
        load_config(write(tmp_path, "[train]\nlearnrate = 0.1\n"))


def test_unknown_section_rejected(tmp_path):
    with pytest.raises(ValidationError, match="optim"):
        load_config(write(tmp_path, "[optim]\nlr = 0.1\n"))


def test_parse_error_has_line(tmp_path):
    with pytest.raises(ParseError) as ei:
        load_config(write(tmp_path, "[train]\nepochs = 3\nthis line is broken\n"))
    assert ei.value.line == 3


def test_bad_value_is_validation_error(tmp_path):
    with pytest.raises(ValidationError):
        load_config(write(tmp_path, "[train]\nepochs = many\n"))
    with pytest.raises(ValidationError):
        load_config(overrides=["schedule.target_rate=1.5"])


def test_overrides_beat_file(tmp_path):
    cfg = load_config(write(tmp_path, "[train]\nseed = 4\nepochs = 9\n"), ["train.epochs=2", "network.widths=4,4,8,8"])
    assert cfg.seed == 4 and cfg["train.epochs"] == 2 and cfg["network.widths"] == (4, 4, 8, 8)
    with pytest.raises(ValidationError):
        load_config(overrides=["epochs=2"])


def test_seed_env_fallback(tmp_path):
    assert load_config(env={"DYNGATE_SEED": "17"}).seed == 17
    assert load_config(overrides=["train.seed=3"], env={"DYNGATE_SEED": "17"}).seed == 3


def test_target_rate_shared_with_network():
    cfg = load_config(overrides=["schedule.target_rate=0.36"], env={})
    assert cfg.network_config().target_rate == 0.36
    assert cfg.train_config().schedule.target_rate == 0.36


def test_manifest_relative_to_config(tmp_path):
    cfg = load_config(write(tmp_path, "[data]\nmanifest = d/manifest.tsv\n"), env={})
    assert cfg.manifest == tmp_path / "d" / "manifest.tsv"


def test_round_trip_text(tmp_path):
    cfg = load_config(overrides=["network.grid=2,2", "train.variant=normal"], env={})
    again = load_config(write(tmp_path, cfg.to_text()), env={})
    assert again.values == cfg.values
