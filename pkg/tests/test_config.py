import json

import pytest

from meshuda.config import ENV_OUTPUT_ROOT, ENV_WORKERS, PipelineConfig, output_root, parse_config, worker_count
from meshuda.exceptions import ConfigError


def test_defaults_validate():
    cfg = PipelineConfig().validate()
    assert cfg.grid() == [0.1, 0.01, 0.001, 0.0001, 0.0]
    assert cfg.swept() == ["medium"]


def test_paper_profile_uses_full_grid():
    cfg = parse_config(json.dumps({"train": {"profile": "paper"}}))
    assert len(cfg.grid()) == 10 and cfg.grid()[-1] == 0.0
    assert cfg.train_config().max_epochs == 3000


def test_json_errors_carry_line_and_column():
    with pytest.raises(ConfigError, match=r"line 2, column"):
        parse_config('{\n  "task": ,\n}')


def test_unknown_field_names_line():
    with pytest.raises(ConfigError, match=r"unknown config field 'lamda'.*line 3"):
        parse_config('{\n  "task": "plate-heat",\n  "lamda": [1]\n}')


@pytest.mark.parametrize("patch, field", [
    ({"task": "airfoil"}, "task"),
    ({"kinds": ["mmd"]}, "kinds"),
    ({"strategies": ["best"]}, "strategies"),
    ({"difficulties": ["brutal"]}, "difficulties"),
    ({"lambda_grid": [-1.0]}, "lambda_grid"),
    ({"seeds": []}, "seeds"),
    ({"boundaries": {"easy": 0.2, "medium": 0.5, "hard": 0.6}}, "boundaries"),
    ({"train": {"profile": "desk", "learning_rat": 1}}, "train"),
    ({"resolution": 3}, "resolution"),
    ({"version": 2}, "version"),
])
def test_validation_names_the_field(patch, field):
    text = json.dumps({"n_samples": 10, **patch}, indent=2)
    with pytest.raises(ConfigError, match=f"field '{field}'"):
        parse_config(text)


def test_environment_overrides(monkeypatch, tmp_path):
    monkeypatch.delenv(ENV_OUTPUT_ROOT, raising=False)
    cfg = PipelineConfig(output_root="from-config")
    assert str(output_root(cfg)) == "from-config"
    monkeypatch.setenv(ENV_OUTPUT_ROOT, str(tmp_path))
    assert output_root(cfg) == tmp_path
    assert str(output_root(cfg, "flag")) == "flag"
    monkeypatch.setenv(ENV_WORKERS, "3")
    assert worker_count(None) == 3
    assert worker_count(2) == 2
    monkeypatch.setenv(ENV_WORKERS, "many")
    with pytest.raises(ConfigError):
        worker_count(None)
    with pytest.raises(ConfigError):
        worker_count(0)
