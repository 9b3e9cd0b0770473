import json

import pytest

from adaptmesh.config import SCHEMA_VERSION, ConfigError, RunConfig


def test_roundtrip(tmp_path):
    cfg = RunConfig()
    cfg.dump(tmp_path / "c.json")
    back = RunConfig.load(tmp_path / "c.json")
    assert back == cfg
    assert back.to_dict()["schema_version"] == SCHEMA_VERSION


def test_partial_config_keeps_defaults(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 4, "ppo": {"gamma": 0.9}, "action": {"n_nn": 8}}))
    cfg = RunConfig.load(tmp_path / "c.json")
    assert cfg.seed == 4 and cfg.ppo.gamma == 0.9 and cfg.ppo.gae_lambda == 0.95 and cfg.action.n_nn == 8
    base = RunConfig().pipeline_config()
    assert cfg.pipeline_config() == base
    assert cfg.env_config(smooth_normals=False).pipeline.smooth_normals is False


@pytest.mark.parametrize("data", [
    {"colour": 1},
    {"ppo": {"gama": 0.6}},
    {"ppo": {"gamma": 1.0}},
    {"smoothing": {"radius": -1.0}},
    {"action": {"eta_min": 0.9, "eta_max": 0.8}},
    {"seed": -1},
    {"schema_version": 999},
    {"field": []},
])
def test_invalid_configs_rejected(data):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(data)


def test_bad_json(tmp_path):
    (tmp_path / "c.json").write_text("{ nope")
    with pytest.raises(ConfigError, match="line 1"):
        RunConfig.load(tmp_path / "c.json")
