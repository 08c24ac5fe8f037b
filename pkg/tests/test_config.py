import pytest

from crillab.config import ExperimentConfig, dump_config, load_config, parse_config
from crillab.errors import ConfigError


def test_empty_document_gives_defaults():
    cfg = parse_config("")
    assert cfg.suite.n_tasks == 4 and cfg.train.strategy == "cril"
    assert cfg.strategies == ["finetune", "rehearsal", "original_dgr", "trajectory_dgr", "cril"]


def test_round_trip():
    text = "suite:\n  n_tasks: 3\ntrain:\n  epochs: 7\n  lr_policy: 1\nseeds: [0, 1]\n"
    cfg = parse_config(text)
    assert cfg.suite.n_tasks == 3 and cfg.train.epochs == 7
    assert cfg.train.lr_policy == 1.0 and isinstance(cfg.train.lr_policy, float)
    again = parse_config(dump_config(cfg))
    assert again.to_dict() == cfg.to_dict()


def test_unknown_key_names_field_and_line():
    text = "suite:\n  n_tasks: 2\n  colour: red\n"
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.field == "suite.colour"
    assert "line 3" in str(info.value)


def test_unknown_top_level_key():
    with pytest.raises(ConfigError) as info:
        parse_config("seeds: [0]\nepochs: 3\n")
    assert info.value.field == "epochs" and "line 2" in str(info.value)


@pytest.mark.parametrize("text, field", [
    ("suite:\n  n_tasks: 0\n", "suite.n_tasks"),
    ("suite:\n  image_size: 30\n", "suite.image_size"),
    ("suite:\n  n_tasks: two\n", "suite.n_tasks"),
    ("train:\n  batch_size: 0\n", "train.batch_size"),
    ("train:\n  epochs: true\n", "train.epochs"),
    ("strategies: [cril, magic]\n", "strategies"),
    ("seeds: [0, x]\n", "seeds"),
    ("output_root: 3\n", "output_root"),
])
def test_invalid_values_name_the_field(text, field):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.field == field
    assert "line" in str(info.value)


def test_invalid_yaml_reports_line():
    with pytest.raises(ConfigError, match="line 3"):
        parse_config("suite:\n  n_tasks: 2\n\tseed: 1\n")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.yaml")


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("CRILLAB_OUTPUT_ROOT", str(tmp_path))
    assert ExperimentConfig().resolved_output_root() == tmp_path
    assert ExperimentConfig(output_root="here").resolved_output_root().name == "here"
    monkeypatch.delenv("CRILLAB_OUTPUT_ROOT")
    assert str(ExperimentConfig().resolved_output_root()) == "runs"


def test_train_config_override():
    cfg = parse_config("train:\n  epochs: 3\n")
    tc = cfg.train_config("rehearsal", 4)
    assert (tc.strategy, tc.seed, tc.epochs) == ("rehearsal", 4, 3)
    assert cfg.train.strategy == "cril"
