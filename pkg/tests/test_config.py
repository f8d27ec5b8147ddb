import json

import pytest

from snitchdt.attacks import AttackSpec
from snitchdt.config import (
    ConfigError,
    derive_seed,
    load_config,
    load_suite,
    scenario_from_dict,
    suite_from_dict,
)


def test_minimal_config_fills_defaults():
    cfg = scenario_from_dict({"scenario_id": "x", "attack": {"kind": "bias"}})
    assert cfg.node_ids == ["bus1", "bus5", "bus21", "bus26"]
    assert cfg.n_steps == 10000
    assert cfg.attack == AttackSpec("bias", "bus1", t_start=0.1, magnitude=0.1)
    assert all(n.setpoint_at(0.5) == 0.2 for n in cfg.nodes)


def test_step_count_from_duration():
    assert scenario_from_dict({"scenario_id": "x", "duration_s": 1.0, "dt": 1e-4}).n_steps == 10000
    assert scenario_from_dict({"scenario_id": "x", "duration_s": 0.25, "dt": 5e-5}).n_steps == 5000


@pytest.mark.parametrize(
    "data, field",
    [
        ({"plant": {"q_min": 0.6, "q_max": 0.5}}, "q_min"),
        ({"nodes": [{"id": "a", "params": {"q_min": 1.0}}]}, "q_min"),
        ({"duration_s": 0.00015}, "duration_s"),
        ({"attack": {"kind": "bias", "node": "nowhere"}}, "attack.node"),
        ({"detectors": ["snitch", "oracle"]}, "detectors"),
        ({"nodes": [{"id": "a"}, {"id": "a"}]}, "unique"),
        ({"calibration_s": 0.01}, "calibration_s"),
        ({"network": {"drop_prob": 1.5}}, "drop_prob"),
        ({"consensus": {"quorum_k": 1}}, "quorum_k"),
        ({"twin": {"window_s": 0.0}}, "window_s"),
        ({"master_seed": -1}, "master_seed"),
    ],
)
def test_validation_errors_name_field(data, field):
    with pytest.raises(ConfigError, match=field):
        scenario_from_dict({"scenario_id": "x", **data})


@pytest.mark.parametrize(
    "data",
    [
        {"scenario_id": "x", "bogus": 1},
        {"scenario_id": "x", "plant": {"k_q": 0.05, "gain": 2}},
        {"scenario_id": "x", "nodes": [{"id": "a", "colour": "red"}]},
        {"scenario_id": "x", "network": {"latency": 1}},
        {"scenario_id": "x", "ann": {"train": {"lr": 0.1}}},
        {"scenario_id": "x", "attack": {"kind": "bias", "power": 2}},
    ],
)
def test_unknown_keys_rejected(data):
    with pytest.raises(ConfigError, match="unknown"):
        scenario_from_dict(data)


def test_missing_scenario_id():
    with pytest.raises(ConfigError, match="scenario_id"):
        scenario_from_dict({})


def test_echo_round_trip():
    data = {
        "scenario_id": "rt",
        "attack": {"kind": "coordinated"},
        "nodes": [
            {"id": "bus1", "setpoints": [[0, 0.1], [0.5, 0.3]]},
            {"id": "bus5", "params": {"k_droop": 3.0}},
            {"id": "bus21", "twin": {"window_s": 0.02}},
        ],
        "network": {"drop_prob": 0.1},
        "detectors": ["ann", "snitch"],
    }
    cfg = scenario_from_dict(data)
    echoed = json.loads(json.dumps(cfg.to_dict()))
    again = scenario_from_dict(echoed)
    assert again == cfg
    assert again.config_hash() == cfg.config_hash()


def test_detector_order_is_canonical():
    a = scenario_from_dict({"scenario_id": "x", "detectors": ["ann", "snitch"]})
    b = scenario_from_dict({"scenario_id": "x", "detectors": ["snitch", "ann"]})
    assert a == b and a.detectors == ("snitch", "ann")


def test_per_node_overrides_inherit_broadcast():
    cfg = scenario_from_dict(
        {"scenario_id": "x", "plant": {"k_droop": 3.0}, "nodes": [{"id": "a"}, {"id": "b", "params": {"k_q": 0.1}}]}
    )
    assert cfg.node("a").params.k_droop == 3.0
    assert cfg.node("b").params.k_droop == 3.0 and cfg.node("b").params.k_q == 0.1


def test_derive_seed_is_stable_and_purpose_specific():
    assert derive_seed(0, "noise", "bus1") == derive_seed(0, "noise", "bus1")
    assert derive_seed(0, "noise", "bus1") != derive_seed(0, "noise", "bus5")
    assert derive_seed(0, "noise", "bus1") != derive_seed(0, "network")
    assert 0 <= derive_seed(123, "x") < 2**64


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(bad)


def test_suite_with_base_config_file(tmp_path):
    (tmp_path / "base.json").write_text(json.dumps({"scenario_id": "b", "duration_s": 0.5}))
    (tmp_path / "suite.json").write_text(json.dumps({"suite_id": "s", "base_config": "base.json", "scenarios_per_type": 2}))
    suite = load_suite(tmp_path / "suite.json")
    assert suite.base.duration_s == 0.5 and suite.scenarios_per_type == 2


def test_suite_validation():
    with pytest.raises(ConfigError, match="attack_types"):
        suite_from_dict({"attack_types": ["bias", "flood"]})
    with pytest.raises(ConfigError, match="unknown"):
        suite_from_dict({"ranges": {"onset": [0, 1]}})
    with pytest.raises(ConfigError, match="bias_magnitude"):
        suite_from_dict({"ranges": {"bias_magnitude": [0.2, 0.1]}})
