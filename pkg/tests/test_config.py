import json

import pytest

from conftest import CONFIGS
from rdtlab.config import CHECKS, ConfigError, ExperimentConfig


def test_defaults_validate_and_round_trip():
    cfg = ExperimentConfig()
    cfg.validate()
    again = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
    assert again == cfg
    assert cfg.T_final() == pytest.approx(0.1)
    assert cfg.eps1() == pytest.approx(1e-3)
    assert cfg.balls() == ((0.5, 0.5), 0.3, 0.45)
    assert tuple(cfg.verify.checks) == CHECKS


@pytest.mark.parametrize("name", sorted(p.stem for p in CONFIGS.glob("*.json")))
def test_shipped_configs_load(name):
    ExperimentConfig.load(CONFIGS / f"{name}.json")


@pytest.mark.parametrize("doc", [
    {"grid": {"res": 100}},
    {"grid": {"dim": 4}},
    {"grid": {"resolution": 64}},
    {"flow": {"scheme": "leapfrog"}},
    {"flow": {"uniform_snapshots": 5}},
    {"flow": {"T_final": -1}},
    {"initial": {"kind": "file"}},
    {"initial": {"amplitude_cap": 0.5}},
    {"initial": {"kind": "pulled_back"}, "background": {"kind": "perturbed"}},
    {"scalar_test": {"sigma": 0.3}},
    {"scalar_test": {"eps1_rule": "fixed"}},
    {"verify": {"checks": ["nonsense"]}},
    {"verify": {"p_list": [1.0]}},
    {"output": {"formats": ["xml"]}},
    {"seed": "one"},
    {"flow": {"monitor": 1}},
    {"grid": 3},
])
def test_invalid_configs_rejected(doc):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)


def test_overrides():
    cfg = ExperimentConfig().with_overrides(["grid.res=64", "flow.scheme=rk4", "seed=9",
                                             "verify.checks=[\"l2_rate\"]"])
    assert cfg.grid.res == 64 and cfg.flow.scheme == "rk4" and cfg.seed == 9
    assert cfg.verify.checks == ["l2_rate"]
    for bad in ["grid.nope=1", "noequals", "grid=1"]:
        with pytest.raises(ConfigError):
            ExperimentConfig().with_overrides([bad])


def test_fixed_eps1_and_ball_checks():
    cfg = ExperimentConfig.from_dict({"scalar_test": {"eps1_rule": "fixed", "eps1": 0.02}})
    assert cfg.eps1() == 0.02
    bad = ExperimentConfig.from_dict({"verify": {"ball_radius": 0.48}})
    with pytest.raises(ConfigError):
        bad.balls()


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        ExperimentConfig.load(tmp_path / "missing.json")
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        ExperimentConfig.load(p)
