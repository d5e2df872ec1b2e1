import pytest

from pact.config import ConfigError, ExperimentConfig, dump_config, load_config, parse_config
from pact.models import GridModelSpec, ResidualStackSpec


def test_empty_document_gives_defaults():
    cfg = parse_config("")
    assert cfg == ExperimentConfig()
    assert isinstance(cfg.model, ResidualStackSpec)


def test_sections_are_parsed():
    cfg = parse_config("model:\n  kind: grid\n  grouping: 2\ntrain:\n  estimator: reinforce\n  steps: 7\n"
                       "eval:\n  modes: [act]\noutput: out\n")
    assert cfg.model == GridModelSpec(grouping=2)
    assert cfg.train.estimator == "reinforce" and cfg.train.steps == 7
    assert cfg.eval.modes == ["act"] and cfg.output == "out"


@pytest.mark.parametrize("text,expected", [
    ("train:\n  steps: 5\n  stepz: 3\n", "c.yaml:3: unknown key 'stepz' in section 'train'"),
    ("model:\n  kind: grid\n  colour: red\n", "c.yaml:3: unknown key 'colour' in section 'model'"),
    ("seed: 3\n", "c.yaml:1: unknown key 'seed'"),
    ("eval:\n  modes:\n    - relaxed\n    - sideways\n", "c.yaml:4: eval.modes.1:"),
    ("train:\n  tau: lots\n", "c.yaml:2: train.tau:"),
    ("model:\n  kind: tree\n", "c.yaml:2:"),
    ("- 1\n- 2\n", "c.yaml:1: top level must be a mapping"),
    ("train: [1,\n", "c.yaml:"),
])
def test_diagnostics_name_key_and_line(text, expected):
    with pytest.raises(ConfigError) as err:
        parse_config(text, "c.yaml")
    assert str(err.value).startswith(expected), str(err.value)


def test_resolved_config_round_trips(tmp_path):
    cfg = parse_config("model:\n  kind: rnn\ntrain:\n  tau: 0.2\n")
    text = dump_config(cfg, {"optimizer": "sgd"})
    assert "notes:" in text and "momentum: 0.9" in text
    path = tmp_path / "r.yaml"
    path.write_text(text)
    assert load_config(path) == cfg


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")
