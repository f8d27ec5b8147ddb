import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from snitchdt.attacks import AttackSpec
from snitchdt.config import scenario_from_dict, suite_from_dict
from snitchdt.evaluate import calibrate_all
from snitchdt.runner import TRACE_COLUMNS, run_roc, run_scenario, run_suite
from snitchdt.simulate import onset_index, simulate
from snitchdt.twin import TwinConfig

SMALL = {
    "duration_s": 0.3,
    "calibration_s": 0.2,
    "ann": {"train_duration_s": 0.6, "setpoint_hold_s": 0.1, "train": {"epochs": 3}},
}


def small_cfg(**extra):
    return scenario_from_dict({"scenario_id": "small", **SMALL, **extra})


def small_suite(**extra):
    return suite_from_dict(
        {
            "suite_id": "small",
            "scenarios_per_type": 2,
            "base": {**SMALL, "trace_every": 5},
            "ranges": {"onset_s": [0.05, 0.15]},
            **extra,
        }
    )


def read_csv(path):
    with open(path) as fh:
        first = fh.readline()
        rows = list(csv.reader(fh))
    return first, rows


def test_onset_index():
    assert onset_index(0.1, 1e-4) == 999  # step 1000 is array index 999
    assert onset_index(0.0, 1e-4) == 0
    assert onset_index(0.10005, 1e-4) == 1000


def test_run_scenario_writes_all_files(tmp_path):
    cfg = small_cfg(attack={"kind": "bias", "node": "bus5"})
    art = run_scenario(cfg, tmp_path)
    for name in ("trace.csv", "metrics.json", "metrics.csv", "config_echo.json", "timing.json"):
        assert (tmp_path / name).exists()
    first, rows = read_csv(tmp_path / "trace.csv")
    assert first.startswith("# master_seed=0 config_hash=")
    assert tuple(rows[0]) == TRACE_COLUMNS
    assert len(rows) - 1 == cfg.n_steps * len(cfg.nodes)
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert set(metrics["detectors"]) == {"snitch", "ann"}
    assert metrics["detectors"]["snitch"]["counts"]["tp"] == 1
    assert "compute_time_s" not in (tmp_path / "metrics.json").read_text()
    echo = json.loads((tmp_path / "config_echo.json").read_text())
    assert scenario_from_dict(echo) == cfg
    assert art.verdicts["first_local_step"] is not None


def test_scenario_files_deterministic_and_order_independent(tmp_path):
    a = small_cfg(attack={"kind": "ramp", "node": "bus21"}, detectors=["snitch", "ann"])
    b = small_cfg(attack={"kind": "ramp", "node": "bus21"}, detectors=["ann", "snitch"])
    run_scenario(a, tmp_path / "a")
    run_scenario(b, tmp_path / "b")
    for name in ("trace.csv", "metrics.json", "metrics.csv", "config_echo.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_attack_does_not_change_noise_stream():
    cfg = small_cfg()
    twins = {n: TwinConfig(epsilon=1.0, sigma_sq=1.0) for n in cfg.node_ids}
    clean = simulate(cfg, twins=twins, consensus_on=False)
    hit = simulate(cfg, attack=AttackSpec("bias", "bus1", t_start=0.1, magnitude=0.1), twins=twins, consensus_on=False)
    for node in ("bus5", "bus21", "bus26"):
        assert np.array_equal(clean.nodes[node]["v_meas"], hit.nodes[node]["v_meas"])
    on = hit.nodes["bus1"].onset_index
    # noise sample = meas - true is identical on the attacked node too
    noise_a = clean.nodes["bus1"]["i_meas"] - clean.nodes["bus1"]["i_true"]
    noise_b = hit.nodes["bus1"]["i_meas"] - hit.nodes["bus1"]["i_true"]
    assert np.allclose(noise_a, noise_b, atol=1e-15)
    assert np.array_equal(clean.nodes["bus1"]["q_meas"][:on], hit.nodes["bus1"]["q_meas"][:on])


def test_lockstep_and_receiver_view():
    cfg = small_cfg(attack={"kind": "bias", "node": "bus1"})
    cal = calibrate_all(replace(cfg, detectors=("snitch",)), 0)
    sim = simulate(cfg, twins=cal.twins)
    tr = sim.nodes["bus1"]
    on = tr.onset_index
    assert np.allclose(tr["qs_recv"][on:] - tr["qs_clean"][on:], 0.1)
    assert np.array_equal(tr["qs_recv"][:on], tr["qs_clean"][:on])
    assert len(sim.verdicts) == cfg.n_steps


def test_delay_attack_feeds_stale_measurements():
    cfg = small_cfg(plant={"sigma_meas": 0.0}, attack={"kind": "delay", "node": "bus1", "t_start": 0.1, "delay_s": 0.002})
    twins = {n: TwinConfig(epsilon=1.0, sigma_sq=1.0) for n in cfg.node_ids}
    # a setpoint change after onset makes the lag visible
    nodes = tuple(replace(n, setpoints=((0.0, 0.2), (0.15, 0.3))) for n in cfg.nodes)
    sim = simulate(replace(cfg, nodes=nodes), twins=twins, consensus_on=False)
    tr = sim.nodes["bus1"]
    k = onset_index(0.2, cfg.dt)
    assert tr["v_meas"][k] == tr["v_true"][k - 20]


def test_suite_bookkeeping_and_determinism(tmp_path):
    suite = small_suite()
    r1 = run_suite(suite, tmp_path / "one")
    r2 = run_suite(suite, tmp_path / "two", jobs=2)
    _, rows = read_csv(tmp_path / "one" / "metrics.csv")
    body = rows[1:]
    assert len(body) == 2 * (8 + 1)
    assert [r[0] for r in body if r[1] == "snitch"][-1] == "AGGREGATE"
    for name in ("metrics.csv", "metrics.json", "calibration.json", "config_echo.json", "roc_snitch.csv", "auc.json"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()
    for f in sorted((tmp_path / "one" / "traces").iterdir()):
        assert f.read_bytes() == (tmp_path / "two" / "traces" / f.name).read_bytes()
    assert r1.failures == r2.failures == 0


def test_roc_rejects_single_class():
    with pytest.raises(ValueError, match="single class"):
        run_roc(small_suite(attack_types=["none"]))


def test_roc_files_have_endpoints(tmp_path):
    run_roc(small_suite(attack_types=["none", "bias"]), tmp_path)
    for det in ("snitch", "ann"):
        _, rows = read_csv(tmp_path / f"roc_{det}.csv")
        assert rows[0] == ["threshold", "fpr", "tpr"]
        assert rows[1][1:] == ["0.0", "0.0"] and rows[-1][1:] == ["1.0", "1.0"]
