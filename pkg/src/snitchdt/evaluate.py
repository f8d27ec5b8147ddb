"""Calibration of both detectors and per-scenario scoring."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import NO_ATTACK
from .baseline import AnnModel, feature_matrix, forward, train_sgd
from .config import NodeConfig, ScenarioConfig, derive_seed
from .metrics import (
    ConfusionCounts,
    MetricsReport,
    count_alarm_episodes,
    detection_delay,
    roc_curve,
    sustained,
    tracking_rmse,
)
from .simulate import SimResult, simulate
from .twin import TwinConfig, calibrate

# stand-in threshold/variance while collecting healthy residuals
_PROBE_TWIN = {"epsilon": 1.0, "sigma_sq": 1.0}


@dataclass
class Calibration:
    twins: dict[str, TwinConfig]
    ann: AnnModel | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "twins": {n: {"sigma_sq": c.sigma_sq, "epsilon": c.epsilon} for n, c in self.twins.items()},
            "ann": None if self.ann is None else self.ann.to_dict(),
        }


def calibrate_twins(cfg: ScenarioConfig, seed: int) -> dict[str, TwinConfig]:
    """Attack-free warm-up run; per-node (sigma_sq, epsilon) from its residuals."""
    probe = {n.id: replace(n.twin, **_PROBE_TWIN) for n in cfg.nodes}
    n_cal = int(round(cfg.calibration_s / cfg.dt))
    sim = simulate(cfg, seed=seed, attack=NO_ATTACK, n_steps=n_cal, twins=probe, consensus_on=False)
    out = {}
    for nc in cfg.nodes:
        sigma_sq, eps = calibrate(sim.nodes[nc.id]["residual"])
        out[nc.id] = replace(nc.twin, sigma_sq=sigma_sq, epsilon=eps)
    return out


def ann_dataset(cfg: ScenarioConfig, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Healthy runs under random piecewise-constant setpoints.

    Returns (features, target setpoint, measured reactive power) with one row
    per retained sample.
    """
    a = cfg.ann
    n_steps = int(round(a.train_duration_s / cfg.dt))
    rng = np.random.default_rng(derive_seed(seed, "ann_schedule"))
    nodes = []
    for nc in cfg.nodes:
        times = np.arange(0.0, a.train_duration_s, a.setpoint_hold_s)
        levels = rng.uniform(*a.setpoint_range, size=len(times))
        nodes.append(replace(nc, setpoints=tuple((float(t), float(q)) for t, q in zip(times, levels))))
    train_cfg = replace(cfg, nodes=tuple(nodes), duration_s=a.train_duration_s)
    probe = {n.id: replace(n.twin, **_PROBE_TWIN) for n in cfg.nodes}
    sim = simulate(train_cfg, seed=derive_seed(seed, "ann_runs"), attack=NO_ATTACK, n_steps=n_steps,
                   twins=probe, consensus_on=False)
    xs, ys, qs = [], [], []
    for nc in cfg.nodes:
        tr = sim.nodes[nc.id]
        x = feature_matrix(tr["v_meas"], tr["i_meas"], a.n_m)
        end = np.arange(a.n_m - 1, len(tr["v_meas"]))
        keep = slice(None, None, a.subsample)
        xs.append(x[keep])
        ys.append(tr["qs_clean"][end][keep])
        qs.append(tr["q_meas"][end][keep])
    return np.vstack(xs), np.concatenate(ys), np.concatenate(qs)


def train_ann(cfg: ScenarioConfig, seed: int) -> AnnModel:
    x, y, q_meas = ann_dataset(cfg, seed)
    tcfg = replace(cfg.ann.train, seed=derive_seed(seed, "ann_train") % 2**32)
    result = train_sgd(x, y, tcfg, hidden=cfg.ann.hidden)
    vi = result.val_index
    dev = q_meas[vi] - forward(result.params, x[vi])
    _, eps = calibrate(dev)
    return AnnModel(result.params, cfg.ann.n_m, eps, tcfg, result.val_rmse)


def calibrate_all(cfg: ScenarioConfig, seed: int) -> Calibration:
    twins = {}
    if all(n.twin.calibrated for n in cfg.nodes):
        twins = {n.id: n.twin for n in cfg.nodes}
    else:
        twins = calibrate_twins(cfg, derive_seed(seed, "calibration"))
    ann = train_ann(cfg, derive_seed(seed, "ann")) if "ann" in cfg.detectors else None
    return Calibration(twins, ann, seed)


@dataclass
class DetectorOutput:
    """Per-node, per-step view of one detector on one scenario."""

    name: str
    score: dict[str, np.ndarray]
    hit: dict[str, np.ndarray]
    alarm: dict[str, np.ndarray]
    estimate: dict[str, np.ndarray]
    compute_time_s: float
    sustain_m: int = 5
    extra: dict = field(default_factory=dict)


def snitch_output(sim: SimResult) -> DetectorOutput:
    m = sim.cfg.nodes[0].twin.sustain_m
    score, hit, alarm, est = {}, {}, {}, {}
    for node, tr in sim.nodes.items():
        r = tr["residual"]
        score[node] = np.where(np.isfinite(r), np.abs(r), np.inf)
        hit[node] = tr["hit"]
        alarm[node] = tr["local_alarm"]
        est[node] = tr["twin_q"]
    return DetectorOutput("snitch", score, hit, alarm, est, sim.snitch_time_s, m)


def ann_output(sim: SimResult, model: AnnModel, sustain_m: int = 5) -> DetectorOutput:
    t0 = time.perf_counter()
    score, hit, alarm, est = {}, {}, {}, {}
    for node, tr in sim.nodes.items():
        q_hat = model.predict_series(tr["v_meas"], tr["i_meas"])
        dev = np.abs(tr["q_meas"] - q_hat)
        ready = np.isfinite(dev)
        score[node] = np.where(ready, dev, 0.0)
        hit[node] = ready & (dev > model.epsilon)
        alarm[node] = sustained(hit[node], sustain_m)
        est[node] = np.where(np.isfinite(q_hat), q_hat, tr["qs_clean"])
    return DetectorOutput("ann", score, hit, alarm, est, time.perf_counter() - t0, sustain_m)


@dataclass
class ScenarioScore:
    report: MetricsReport
    attacked: bool
    detected: bool
    delay: int | None
    censored_delay: int | None
    rmse: float | None
    score: np.ndarray
    truth: np.ndarray
    compute_time_s: float


def score_scenario(sim: SimResult, det: DetectorOutput) -> ScenarioScore:
    """Scenario-level label, delay, post-detection RMSE and per-step ROC data.

    Post-detection RMSE compares the detector's own reactive-power estimate
    (held from the detection step on) with the true droop reference.  Missed
    attacks are scored on the delivered reactive power over the whole attack.
    """
    targets = sim.attack.targets()
    attacked = bool(targets)
    n = sim.n_steps

    delays = {}
    for node in targets:
        onset = sim.nodes[node].onset_index
        if onset is None or onset >= n:
            continue
        d = detection_delay(det.hit[node], onset, det.sustain_m)
        if d is not None:
            delays[node] = d

    false_eps = 0
    for node, tr in sim.nodes.items():
        a = det.alarm[node] & ~tr.truth
        false_eps += count_alarm_episodes(a)

    detected = bool(delays)
    if attacked:
        predicted = detected
    else:
        predicted = any(bool(det.alarm[node].any()) for node in sim.nodes)
    counts = ConfusionCounts(
        tp=int(attacked and predicted),
        tn=int(not attacked and not predicted),
        fp=int(not attacked and predicted),
        fn=int(attacked and not predicted),
    )

    delay = min(delays.values()) if delays else None
    censored = None
    rmse = None
    if attacked:
        first = min(sim.nodes[nd].onset_index for nd in targets)
        censored = delay if delay is not None else n - first
        sq, cnt = 0.0, 0
        for node in targets:
            tr = sim.nodes[node]
            onset = tr.onset_index
            if onset is None or onset >= n:
                continue
            if node in delays:
                lo = onset + delays[node]
                series = det.estimate[node]
            else:
                lo = onset
                series = tr["q_true"]
            e = tracking_rmse(series, tr.q_ref_true, (lo, n))
            sq += e * e * (n - lo)
            cnt += n - lo
        rmse = float(np.sqrt(sq / cnt)) if cnt else None

    node_order = list(sim.nodes)
    score = np.concatenate([det.score[nd] for nd in node_order])
    truth = np.concatenate([sim.nodes[nd].truth for nd in node_order])
    finite = np.isfinite(score)
    if not finite.all():
        score = np.where(finite, score, np.max(score[finite], initial=0.0) + 1.0)
    auc = None
    if truth.any() and not truth.all():
        auc = roc_curve(score, truth)[1]

    report = MetricsReport.from_counts(
        det.name,
        sim.cfg.scenario_id,
        counts,
        detection_delay_steps=delay,
        rmse_pu=rmse,
        auc=auc,
        false_alarm_episodes=false_eps,
    )
    return ScenarioScore(report, attacked, detected, delay, censored, rmse, score, truth, det.compute_time_s)


def verdict_summary(sim: SimResult) -> dict:
    cons = sim.consensus
    first_any = None
    for ev in cons.history:
        if ev.kinds != {"none"}:
            first_any = ev.step
            break
    targets = sim.attack.targets()
    onset = min((sim.nodes[n].onset_index for n in targets), default=None)
    return {
        "first_non_none_step": first_any,
        "first_local_step": cons.first_step_with("local"),
        "first_coordinated_step": cons.first_step_with("coordinated"),
        "system_detection_delay_steps": (
            None if first_any is None or onset is None else first_any - (onset + 1)
        ),
        "labels": sorted({ev.label() for ev in cons.history}),
        "transitions": [{"step": t.step, "from": t.previous, "to": t.current} for t in cons.transitions],
        "blind_evaluations": sum(ev.blind for ev in cons.history),
        "stale_flags": sum(bool(ev.stale_nodes) for ev in cons.history),
        "reports_sent": sim.reports_sent,
        "reports_dropped": sim.reports_dropped,
    }
