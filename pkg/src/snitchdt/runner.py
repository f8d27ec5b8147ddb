"""Scenario, suite and ROC runs plus their on-disk artifacts.

Every file written here starts with a header naming the master seed and the
config hash.  Wall-clock timings go to a separate ``timing.json`` so that the
trace and metrics files stay byte-identical between runs with equal seeds.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .attacks import AttackSpec
from .config import ScenarioConfig, SuiteSpec, derive_seed
from .evaluate import (
    Calibration,
    ScenarioScore,
    ann_output,
    calibrate_all,
    score_scenario,
    snitch_output,
    verdict_summary,
)
from .metrics import ConfusionCounts, MetricsReport, roc_curve
from .simulate import SimResult, simulate

log = logging.getLogger(__name__)

TRACE_COLUMNS = (
    "step", "time_s", "node", "v_g_true", "v_g_meas", "q_g_true", "q_g_meas",
    "q_setpoint_received", "twin_pred", "residual", "tau", "local_alarm", "verdict",
)

# headline numbers reported in the source study, kept beside measured values
PUBLISHED_TARGETS = {
    "snitch": {"accuracy": 0.95, "fpr": 0.10, "fnr": 0.08, "detection_delay_steps": 100, "rmse_pu": 0.05},
    "ann": {"detection_delay_steps": 600, "rmse_pu": 0.25},
}


def _num(x: Any) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, float):
        return repr(x) if math.isfinite(x) else ("nan" if math.isnan(x) else repr(x))
    return str(x)


def _header(seed: int, cfg_hash: str) -> str:
    return f"# master_seed={seed} config_hash={cfg_hash}\n"


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n")


def _json_default(o: Any) -> Any:
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _finite_or_none(x: float | None) -> float | None:
    if x is None or not math.isfinite(x):
        return None
    return x


def write_trace(path: Path, sim: SimResult, every: int = 1) -> None:
    cfg = sim.cfg
    with path.open("w", newline="") as fh:
        fh.write(_header(cfg.master_seed, cfg.config_hash()))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        cols = {}
        for node, tr in sim.nodes.items():
            cols[node] = [
                tr[k].tolist()
                for k in ("v_true", "v_meas", "q_true", "q_meas", "qs_recv", "twin_pred", "residual", "tau", "local_alarm")
            ]
        dt = cfg.dt
        for idx in range(every - 1, sim.n_steps, every):
            step = idx + 1
            t = _num(round(step * dt, 12))
            verdict = sim.verdicts[idx]
            for node in sim.nodes:
                c = cols[node]
                w.writerow([step, t, node] + [_num(col[idx]) for col in c] + [verdict])


def write_metrics_csv(path: Path, reports: Iterable[MetricsReport], seed: int, cfg_hash: str) -> None:
    with path.open("w", newline="") as fh:
        fh.write(_header(seed, cfg_hash))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MetricsReport.CSV_COLUMNS)
        for r in reports:
            w.writerow(r.csv_row())


def _report_dict(r: MetricsReport) -> dict:
    d = r.to_dict()
    for k in ("accuracy", "precision", "recall", "f1", "fpr", "fnr", "detection_delay_steps", "rmse_pu", "auc"):
        d[k] = _finite_or_none(d[k])
    return d


@dataclass
class RunArtifacts:
    scenario_id: str
    trace_path: Path | None
    metrics_path: Path | None
    metrics_csv_path: Path | None
    calibration: dict
    config_echo: dict
    reports: dict[str, MetricsReport]
    verdicts: dict
    sim: SimResult | None = None
    scores: dict[str, ScenarioScore] = field(default_factory=dict)


def run_scenario(
    cfg: ScenarioConfig,
    out_dir: str | Path | None = None,
    calibration: Calibration | None = None,
    keep_sim: bool = True,
) -> RunArtifacts:
    """Calibrate (unless given), simulate, score every enabled detector, write files."""
    seed = cfg.master_seed
    if calibration is None:
        calibration = calibrate_all(cfg, seed)
    sim = simulate(cfg, seed=seed, twins=calibration.twins)
    if sim.error:
        raise RuntimeError(f"scenario {cfg.scenario_id} aborted: {sim.error}")

    scores: dict[str, ScenarioScore] = {}
    if "snitch" in cfg.detectors:
        scores["snitch"] = score_scenario(sim, snitch_output(sim))
    if "ann" in cfg.detectors:
        if calibration.ann is None:
            raise RuntimeError("ann detector enabled but no trained model available")
        scores["ann"] = score_scenario(sim, ann_output(sim, calibration.ann))
    reports = {k: s.report for k, s in scores.items()}
    verdicts = verdict_summary(sim)
    echo = cfg.to_dict()

    art = RunArtifacts(
        cfg.scenario_id, None, None, None, calibration.to_dict(), echo, reports, verdicts,
        sim if keep_sim else None, scores,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        h = cfg.config_hash()
        art.trace_path = out / "trace.csv"
        write_trace(art.trace_path, sim, cfg.trace_every)
        art.metrics_path = out / "metrics.json"
        write_json(art.metrics_path, {
            "master_seed": seed,
            "config_hash": h,
            "scenario_id": cfg.scenario_id,
            "detectors": {k: _report_dict(r) for k, r in reports.items()},
            "verdicts": verdicts,
            "calibration": art.calibration,
        })
        art.metrics_csv_path = out / "metrics.csv"
        write_metrics_csv(art.metrics_csv_path, reports.values(), seed, h)
        write_json(out / "config_echo.json", echo)
        write_json(out / "timing.json", {k: {"compute_time_s": s.compute_time_s} for k, s in scores.items()})
    return art


def write_calibration(cfg: ScenarioConfig, out_dir: str | Path) -> Calibration:
    cal = calibrate_all(cfg, cfg.master_seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "calibration.json", {
        "master_seed": cfg.master_seed, "config_hash": cfg.config_hash(), **cal.to_dict(),
    })
    if cal.ann is not None:
        write_json(out / "ann_model.json", {
            "master_seed": cfg.master_seed, "config_hash": cfg.config_hash(), **cal.ann.to_dict(),
        })
    return cal


# ---------------------------------------------------------------- suites


def _uniform(rng: np.random.Generator, lo_hi: tuple[float, float]) -> float:
    lo, hi = lo_hi
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def make_attack(suite: SuiteSpec, kind: str, index: int) -> AttackSpec:
    """Seeded variation of one attack type; independent of noise/network seeds."""
    if kind == "none":
        return AttackSpec()
    r = suite.ranges
    rng = np.random.default_rng(derive_seed(suite.master_seed, "variation", kind, index))
    nodes = list(r.nodes or suite.base.node_ids)
    onset = round(_uniform(rng, r.onset_s), 4)

    def sign() -> float:
        return -1.0 if (r.allow_negative and rng.random() < 0.5) else 1.0

    if kind == "coordinated":
        pick = sorted(rng.choice(len(nodes), size=2, replace=False).tolist())
        stagger = round(_uniform(rng, r.coordinated_stagger_s), 4)
        comps = []
        for j, (ni, t0) in enumerate(zip(pick, (onset, onset + stagger))):
            mag = sign() * _uniform(rng, r.bias_magnitude)
            comps.append(AttackSpec("bias", nodes[ni], t_start=t0, magnitude=mag))
        return AttackSpec("coordinated", t_start=onset, components=tuple(comps))

    node = nodes[int(rng.integers(len(nodes)))]
    if kind == "bias":
        return AttackSpec("bias", node, t_start=onset, magnitude=sign() * _uniform(rng, r.bias_magnitude))
    if kind == "ramp":
        return AttackSpec("ramp", node, t_start=onset, slope=sign() * _uniform(rng, r.ramp_slope))
    if kind == "delay":
        return AttackSpec("delay", node, t_start=onset, delay_s=round(_uniform(rng, r.delay_s), 4))
    raise ValueError(f"unknown attack type {kind!r}")


def suite_scenarios(suite: SuiteSpec) -> list[ScenarioConfig]:
    out = []
    for kind in suite.attack_types:
        for i in range(suite.scenarios_per_type):
            sid = f"{kind}-{i:02d}"
            cfg = replace(
                suite.base,
                scenario_id=sid,
                attack=make_attack(suite, kind, i),
                master_seed=derive_seed(suite.master_seed, "scenario", kind, i),
            ).validate()
            out.append(cfg)
    return out


@dataclass
class ScenarioOutcome:
    cfg: ScenarioConfig
    kind: str
    reports: dict[str, MetricsReport]
    scores: dict[str, ScenarioScore]
    verdicts: dict
    error: str | None = None


def _run_one(args: tuple[ScenarioConfig, Calibration, str, Path | None, bool]) -> ScenarioOutcome:
    cfg, cal, kind, trace_dir, keep_scores = args
    try:
        art = run_scenario(cfg, calibration=cal, keep_sim=trace_dir is not None)
    except Exception as exc:  # a failed scenario must not sink the suite
        log.warning("scenario %s failed: %s", cfg.scenario_id, exc)
        return ScenarioOutcome(cfg, kind, {}, {}, {}, error=f"{type(exc).__name__}: {exc}")
    if trace_dir is not None and art.sim is not None:
        write_trace(trace_dir / f"{cfg.scenario_id}.csv", art.sim, cfg.trace_every)
    scores = art.scores
    if not keep_scores:
        scores = {k: replace(s, score=np.empty(0), truth=np.empty(0, dtype=bool)) for k, s in scores.items()}
    return ScenarioOutcome(cfg, kind, art.reports, scores, art.verdicts)


@dataclass
class SuiteResult:
    suite: SuiteSpec
    outcomes: list[ScenarioOutcome]
    aggregates: dict[str, MetricsReport]
    calibration: Calibration
    roc: dict[str, tuple[list, float]] = field(default_factory=dict)

    @property
    def failures(self) -> int:
        return sum(o.error is not None for o in self.outcomes)

    def rows(self) -> list[MetricsReport]:
        dets = [d for d in ("snitch", "ann") if d in self.aggregates]
        out = []
        for det in dets:
            out.extend(o.reports[det] for o in self.outcomes if det in o.reports)
            out.append(self.aggregates[det])
        return out


def aggregate(detector: str, outcomes: list[ScenarioOutcome], roc_auc: float | None) -> MetricsReport:
    counts = ConfusionCounts()
    delays, detected_delays, rmses, fa = [], [], [], 0
    n_attack = n_detected = 0
    failures = 0
    for o in outcomes:
        if o.error is not None or detector not in o.scores:
            failures += 1
            continue
        s = o.scores[detector]
        counts = counts + s.report.counts
        fa += s.report.false_alarm_episodes
        if s.attacked:
            n_attack += 1
            delays.append(s.censored_delay)
            if s.delay is not None:
                n_detected += 1
                detected_delays.append(s.delay)
            if s.rmse is not None:
                rmses.append(s.rmse)
    extra = {
        "n_attack_scenarios": n_attack,
        "n_detected": n_detected,
        "mean_delay_detected_only": float(np.mean(detected_delays)) if detected_delays else None,
        "delay_censoring": "undetected attacks count as (scenario end - onset) steps",
        "failures": failures,
        "published_targets": PUBLISHED_TARGETS.get(detector, {}),
    }
    rep = MetricsReport.from_counts(
        detector,
        "AGGREGATE",
        counts,
        detection_delay_steps=float(np.mean(delays)) if delays else None,
        rmse_pu=float(np.mean(rmses)) if rmses else None,
        auc=roc_auc,
        false_alarm_episodes=fa,
        extra=extra,
    )
    return rep


def run_suite(
    suite: SuiteSpec,
    out_dir: str | Path | None = None,
    jobs: int = 1,
    with_roc: bool = True,
    write_traces: bool = True,
) -> SuiteResult:
    """Every (attack type, index) scenario with one shared calibration.

    Scenario order in every output is (attack type, index) regardless of
    ``jobs``.
    """
    base = replace(suite.base, master_seed=suite.master_seed)
    cal = calibrate_all(base, derive_seed(suite.master_seed, "suite"))
    cfgs = suite_scenarios(suite)
    kinds = [c.scenario_id.rsplit("-", 1)[0] for c in cfgs]

    out = Path(out_dir) if out_dir is not None else None
    trace_dir = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if write_traces:
            trace_dir = out / "traces"
            trace_dir.mkdir(exist_ok=True)
    tasks = [(c, cal, k, trace_dir, with_roc) for c, k in zip(cfgs, kinds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_one, tasks))
    else:
        outcomes = [_run_one(t) for t in tasks]

    dets = [d for d in ("snitch", "ann") if d in base.detectors]
    roc: dict[str, tuple[list, float]] = {}
    if with_roc:
        for det in dets:
            sc = [o.scores[det] for o in outcomes if det in o.scores]
            score = np.concatenate([s.score for s in sc]) if sc else np.empty(0)
            truth = np.concatenate([s.truth for s in sc]) if sc else np.empty(0, dtype=bool)
            if truth.any() and not truth.all():
                roc[det] = roc_curve(score, truth, suite.roc_points)
    aggregates = {d: aggregate(d, outcomes, roc[d][1] if d in roc else None) for d in dets}
    result = SuiteResult(suite, outcomes, aggregates, cal, roc)
    if out is not None:
        write_suite_outputs(result, out)
    return result


def suite_hash(suite: SuiteSpec) -> str:
    blob = json.dumps(suite.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_suite_outputs(result: SuiteResult, out: Path) -> None:
    suite = result.suite
    h = suite_hash(suite)
    seed = suite.master_seed
    write_metrics_csv(out / "metrics.csv", result.rows(), seed, h)
    write_json(out / "metrics.json", {
        "master_seed": seed,
        "config_hash": h,
        "suite_id": suite.suite_id,
        "failures": result.failures,
        "aggregate": {d: _report_dict(r) for d, r in result.aggregates.items()},
        "scenarios": [
            {
                "scenario_id": o.cfg.scenario_id,
                "attack_type": o.kind,
                "attack": o.cfg.attack.to_dict(),
                "master_seed": o.cfg.master_seed,
                "error": o.error,
                "detectors": {d: _report_dict(r) for d, r in o.reports.items()},
                "verdicts": o.verdicts,
            }
            for o in result.outcomes
        ],
    })
    write_json(out / "calibration.json", {"master_seed": seed, "config_hash": h, **result.calibration.to_dict()})
    write_json(out / "config_echo.json", suite.to_dict())
    for det, (points, auc) in result.roc.items():
        write_roc_csv(out / f"roc_{det}.csv", points, seed, h)
    if result.roc:
        write_json(out / "auc.json", {
            "master_seed": seed, "config_hash": h,
            "auc": {d: a for d, (_, a) in result.roc.items()},
        })
    timing = {}
    for det in result.aggregates:
        times = [o.scores[det].compute_time_s for o in result.outcomes if det in o.scores]
        timing[det] = {"total_compute_time_s": float(np.sum(times)), "mean_compute_time_s": float(np.mean(times)) if times else None}
    write_json(out / "timing.json", timing)


def write_roc_csv(path: Path, points: list, seed: int, cfg_hash: str) -> None:
    with path.open("w", newline="") as fh:
        fh.write(_header(seed, cfg_hash))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("threshold", "fpr", "tpr"))
        for p in points:
            w.writerow((_num(p.threshold), _num(p.fpr), _num(p.tpr)))


def run_roc(suite: SuiteSpec, out_dir: str | Path | None = None, jobs: int = 1) -> dict[str, tuple[list, float]]:
    """Pooled per-step ROC for each detector over a regenerated suite."""
    result = run_suite(suite, out_dir=None, jobs=jobs, with_roc=True, write_traces=False)
    if not result.roc:
        raise ValueError("pooled labels contain a single class; ROC is undefined")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        h = suite_hash(suite)
        for det, (points, _) in result.roc.items():
            write_roc_csv(out / f"roc_{det}.csv", points, suite.master_seed, h)
        write_json(out / "auc.json", {
            "master_seed": suite.master_seed, "config_hash": h,
            "auc": {d: a for d, (_, a) in result.roc.items()},
        })
    return result.roc
