"""Acceptance criteria, one test per criterion.

Each test records a single PASS/FAIL line; the lines are printed together at
the end of the pytest run (see ``conftest.py``).
"""

import filecmp
import itertools
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from snitchdt.baseline import init_params, loss_and_grads
from snitchdt.config import SuiteSpec, derive_seed, scenario_from_dict
from snitchdt.evaluate import calibrate_twins
from snitchdt.metrics import ConfusionCounts, basic_metrics, detection_delay, f1_score, roc_curve
from snitchdt.runner import run_suite
from snitchdt.simulate import simulate
from snitchdt.twin import TwinConfig, trust_score

RESULTS: list[str] = []

# local detection delays (steps) of the first verified run, seeds 0..9
PINNED_BIAS_DELAYS = [4, 4, 5, 4, 5, 5, 5, 5, 5, 5]


def record(n: int, title: str, ok: bool, detail: str) -> None:
    RESULTS.append(f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {title} ({detail})")


def scenario(attack, seed, **extra):
    data = {"scenario_id": f"acc-{seed}", "attack": attack, "detectors": ["snitch"], "master_seed": seed}
    data.update(extra)
    return scenario_from_dict(data)


def run_calibrated(cfg):
    twins = calibrate_twins(cfg, derive_seed(cfg.master_seed, "calibration"))
    return simulate(cfg, twins=twins)


def pair_auc(score, truth):
    pos = score[truth]
    neg = score[~truth]
    gt = (pos[:, None] > neg[None, :]).sum()
    eq = (pos[:, None] == neg[None, :]).sum()
    return (gt + 0.5 * eq) / (pos.size * neg.size)


def test_c01_trust_score_law():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    failures = 0
    n_windows = 1000
    for _ in range(n_windows):
        n = int(rng.integers(1, 200))
        sigma = float(10 ** rng.uniform(-5, -1))
        s2 = sigma * sigma
        if trust_score(np.zeros(n), s2) != 1.0:
            failures += 1
        uniform = sigma * rng.choice([-1.0, 1.0], n)
        if abs(trust_score(uniform, s2) - math.exp(-1)) > 1e-12:
            failures += 1
        r = rng.normal(0, sigma, n)
        base = trust_score(r, s2)
        bumped = r.copy()
        i = int(rng.integers(n))
        bumped[i] = math.copysign(abs(r[i]) + sigma * float(rng.uniform(0.01, 1.0)), r[i])
        if not trust_score(bumped, s2) < base:
            failures += 1
        c = float(rng.uniform(0, 3))
        if not math.isclose(trust_score(c * r, s2), base ** (c * c), rel_tol=1e-12, abs_tol=1e-300):
            failures += 1
    dt = time.perf_counter() - t0
    ok = failures == 0 and dt < 1.0
    record(1, "trust-score law", ok, f"{n_windows} windows, {failures} violations, {dt:.2f}s")
    assert ok


def test_c02_metric_oracle():
    t0 = time.perf_counter()
    mismatches = checked = 0
    for tp, tn, fp, fn in itertools.product(range(13), repeat=4):
        total = tp + tn + fp + fn
        if total == 0 or total > 12:
            continue
        checked += 1
        m = basic_metrics(ConfusionCounts(tp, tn, fp, fn))
        prec = tp / (tp + fp) if tp + fp else None
        rec = tp / (tp + fn) if tp + fn else None
        expect = (
            (tp + tn) / total,
            prec,
            rec,
            fp / (fp + tn) if fp + tn else None,
            fn / (fn + tp) if fn + tp else None,
        )
        if tuple(m) != expect:
            mismatches += 1
        f1 = None if prec is None or rec is None or prec + rec == 0 else 2 * prec * rec / (prec + rec)
        if f1_score(m.precision, m.recall) != f1:
            mismatches += 1
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and dt < 1.0
    record(2, "metric oracle", ok, f"{checked} count tuples, {mismatches} mismatches, {dt:.2f}s")
    assert ok


def test_c03_auc_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    worst = 0.0
    done = 0
    while done < 200:
        n = int(rng.integers(2, 51))
        # coarse scores so ties are common
        score = rng.integers(0, 8, n).astype(float) if done % 2 else rng.normal(size=n)
        truth = rng.random(n) < rng.uniform(0.2, 0.8)
        if truth.all() or not truth.any():
            continue
        worst = max(worst, abs(roc_curve(score, truth)[1] - pair_auc(score, truth)))
        done += 1
    dt = time.perf_counter() - t0
    ok = worst <= 1e-9 and dt < 1.0
    record(3, "AUC oracle", ok, f"{done} instances, max |diff| {worst:.1e}, {dt:.2f}s")
    assert ok


def test_c04_mirror_fidelity():
    cfg = scenario({"kind": "none"}, 0, plant={"sigma_meas": 0.0})
    twins = {n: TwinConfig(epsilon=1.0, sigma_sq=1.0) for n in cfg.node_ids}
    t0 = time.perf_counter()
    sim = simulate(cfg, twins=twins, consensus_on=False)
    dt = time.perf_counter() - t0
    worst = max(float(np.max(np.abs(tr["residual"]))) for tr in sim.nodes.values())
    steps = sim.n_steps
    ok = worst <= 1e-12 and steps == 10000 and len(sim.nodes) == 4 and dt < 1.0
    record(4, "mirror fidelity", ok, f"{steps} steps x {len(sim.nodes)} nodes, max |r| {worst:.1e}, {dt:.2f}s")
    assert ok


def test_c05_bias_detection():
    delays, good = [], 0
    for seed in range(10):
        sim = run_calibrated(scenario({"kind": "bias", "node": "bus1", "t_start": 0.1, "magnitude": 0.1}, seed))
        tr = sim.nodes["bus1"]
        delays.append(detection_delay(tr["hit"], tr.onset_index, 5))
        first = next((ev for ev in sim.consensus.history if ev.kinds != {"none"}), None)
        sustained_alarm = bool(tr["local_alarm"][tr.onset_index :].any())
        if sustained_alarm and first is not None and first.label() == "local:bus1":
            good += 1
    ok = good == 10 and delays == PINNED_BIAS_DELAYS
    record(5, "bias detection", ok, f"{good}/10 local:bus1, delays {delays}, pinned {PINNED_BIAS_DELAYS}")
    assert ok


def test_c06_delay_detection():
    detected, delays = 0, []
    for seed in range(10):
        sim = run_calibrated(scenario({"kind": "delay", "node": "bus1", "t_start": 0.2, "delay_s": 0.02}, seed))
        tr = sim.nodes["bus1"]
        d = detection_delay(tr["hit"], tr.onset_index, 5)
        delays.append(d)
        detected += d is not None
    ok = detected >= 9
    record(6, "delay detection", ok, f"{detected}/10 detected, delays {delays}")
    assert ok


def test_c07_ordering_and_c11_determinism():
    suite = SuiteSpec()
    with tempfile.TemporaryDirectory() as tmp:
        a, b = Path(tmp) / "a", Path(tmp) / "b"
        t0 = time.perf_counter()
        res = run_suite(suite, a)
        runtime = time.perf_counter() - t0
        run_suite(suite, b)
        files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name != "timing.json")
        differing = [str(f) for f in files if not filecmp.cmp(a / f, b / f, shallow=False)]
        other = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file() and p.name != "timing.json")

    s, n = res.aggregates["snitch"], res.aggregates["ann"]
    ordered = (
        s.detection_delay_steps < n.detection_delay_steps
        and s.rmse_pu < n.rmse_pu
        and s.auc > n.auc
    )
    record(
        7,
        "ordering vs ANN",
        ordered,
        f"delay {s.detection_delay_steps:.1f} vs {n.detection_delay_steps:.1f} steps, "
        f"RMSE {s.rmse_pu:.4f} vs {n.rmse_pu:.4f} pu, AUC {s.auc:.3f} vs {n.auc:.3f}; "
        f"accuracy {s.accuracy:.2f} vs {n.accuracy:.2f}",
    )
    same = not differing and files == other and len(files) > 0
    record(
        11,
        "determinism",
        same and runtime < 60.0,
        f"{len(files)} files compared, {len(differing)} differ, suite runtime {runtime:.1f}s (target < 60s)",
    )
    assert ordered
    assert same and runtime < 60.0


def test_c08_false_alarm_budget():
    bad = []
    for seed in range(10):
        sim = run_calibrated(scenario({"kind": "none"}, 100 + seed))
        labels = set(sim.verdicts)
        if labels != {"none"}:
            bad.append((seed, sorted(labels)))
    ok = not bad
    record(8, "false-alarm budget", ok, f"{10 - len(bad)}/10 runs all-none" + (f", offenders {bad}" if bad else ""))
    assert ok


def test_c09_coordinated_classification():
    attack = {
        "kind": "coordinated",
        "components": [
            {"kind": "bias", "node": "bus1", "t_start": 0.1, "magnitude": 0.1},
            {"kind": "bias", "node": "bus21", "t_start": 0.15, "magnitude": 0.1},
        ],
    }
    good = 0
    for seed in range(20):
        sim = run_calibrated(scenario(attack, seed, network={"drop_prob": 0.1}))
        sets = {v.implicated_nodes for ev in sim.consensus.history for v in ev.verdicts if v.kind == "coordinated"}
        if sets == {frozenset({"bus1", "bus21"})}:
            good += 1
    ok = good >= 18
    record(9, "coordinated classification", ok, f"{good}/20 seeds coordinated on exactly bus1|bus21")
    assert ok


def _batched_loss(thetas, p, x, y):
    """Loss 0.5*(pred - y)^2 for many flattened parameter vectors at once."""
    h_n, n_in = p.w1.shape
    w1 = thetas[:, : h_n * n_in].reshape(-1, h_n, n_in)
    b1 = thetas[:, h_n * n_in : h_n * n_in + h_n]
    w2 = thetas[:, h_n * n_in + h_n : h_n * n_in + 2 * h_n]
    b2 = thetas[:, -1]
    z = (x - p.x_mean) / p.x_std
    hidden = np.tanh(w1 @ z + b1)
    pred = np.sum(hidden * w2, axis=1) + b2
    return 0.5 * (pred - y) ** 2


def test_c10_ann_gradient_check():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1010)
    h = 1e-5
    worst = 0.0
    n_triples = 100
    for _ in range(n_triples):
        p = init_params(40, 16, int(rng.integers(2**31)), w1_gain=1.0)
        p.b1 = rng.normal(0, 0.5, 16)
        p.b2 = float(rng.normal())
        x = rng.normal(size=40)
        y = float(rng.normal())
        _, g = loss_and_grads(p, x, y)
        theta, grad = p.flat(), g.flat()
        step = h * np.eye(theta.size)
        num = (_batched_loss(theta + step, p, x, y) - _batched_loss(theta - step, p, x, y)) / (2 * h)
        scale = np.maximum(np.abs(num), np.abs(grad))
        mask = scale > 1e-6
        if mask.any():
            worst = max(worst, float(np.max(np.abs(num - grad)[mask] / scale[mask])))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-4 and dt < 5.0
    record(10, "ANN gradient check", ok, f"{n_triples} triples x {theta.size} params, max rel err {worst:.1e}, {dt:.2f}s")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
