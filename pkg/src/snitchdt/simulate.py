"""Lockstep co-simulation of plants, attacks, twins and the trust network."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import attacks
from .attacks import AttackSpec, ChannelHistory, apply_attack
from .config import ScenarioConfig, derive_seed
from .coordination import Consensus, MessageBus, TrustReport
from .plant import ControllerInputs, SimulationError, initial_state, plant_step
from .twin import SnitchTwin, TwinConfig

MEAS_CHANNELS = ("v_meas", "q_meas", "i_meas")

TRACE_FIELDS = (
    "v_true", "v_meas", "q_true", "q_meas", "i_true", "i_meas", "qs_recv", "qs_clean",
    "twin_pred", "twin_q", "residual", "tau", "hit", "local_alarm",
)


@dataclass
class NodeTrace:
    node: str
    arrays: dict[str, np.ndarray]
    truth: np.ndarray
    onset_index: int | None
    q_ref_true: np.ndarray

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]


@dataclass
class SimResult:
    cfg: ScenarioConfig
    attack: AttackSpec
    n_steps: int
    nodes: dict[str, NodeTrace]
    verdicts: list[str]
    consensus: Consensus
    reports_sent: int = 0
    reports_dropped: int = 0
    snitch_time_s: float = 0.0
    error: str | None = None
    meta: dict = field(default_factory=dict)

    @property
    def steps(self) -> np.ndarray:
        return np.arange(1, self.n_steps + 1)


def onset_index(t_start: float, dt: float) -> int:
    """Array index (step - 1) of the first step with t >= t_start."""
    step = int(np.ceil(t_start / dt - 1e-9))
    return max(step, 1) - 1


def clean_setpoints(node_cfg, n_steps: int, dt: float) -> list[float]:
    return [node_cfg.setpoint_at(k * dt) for k in range(1, n_steps + 1)]


def simulate(
    cfg: ScenarioConfig,
    seed: int | None = None,
    attack: AttackSpec | None = None,
    n_steps: int | None = None,
    twins: dict[str, TwinConfig] | None = None,
    consensus_on: bool = True,
) -> SimResult:
    """Run one scenario and keep every per-step signal in memory.

    Sub-seeds: measurement noise per node and the network stream are derived
    independently from ``seed`` so changing one purpose never shifts another.
    """
    seed = cfg.master_seed if seed is None else seed
    attack = cfg.attack if attack is None else attack
    n = cfg.n_steps if n_steps is None else n_steps
    dt = cfg.dt
    ids = cfg.node_ids

    nodes = []
    for nc in cfg.nodes:
        params = nc.params
        sp = clean_setpoints(nc, n, dt)
        q0 = nc.setpoint_at(0.0)
        state = initial_state(q0, params)
        tcfg = (twins or {}).get(nc.id, nc.twin)
        twin = SnitchTwin(params, tcfg, q0)
        rng = np.random.default_rng(derive_seed(seed, "noise", nc.id))
        noise = [tuple(row) for row in rng.standard_normal((n, 3)).tolist()]
        chans = attacks.attacked_channels(attack, nc.id)
        histories = {}
        for leaf in attack.leaves():
            if leaf.node == nc.id and leaf.kind == "delay":
                for ch in leaf.channels:
                    if ch != "q_setpoint":
                        h = ChannelHistory.for_delay(leaf.delay_s, dt)
                        attacks.check_history_capacity(leaf, h.capacity, dt)
                        histories[ch] = h
        nodes.append(
            dict(
                id=nc.id, params=params, sp=sp, state=state, twin=twin, noise=noise,
                attack_sp="q_setpoint" in chans,
                attack_meas=[c for c in MEAS_CHANNELS if c in chans],
                histories=histories,
                fb_v=state.v_g, fb_q=state.q_g,
                use_q=tcfg.monitored_channel == "q_g",
                rec={k: [] for k in TRACE_FIELDS},
            )
        )

    bus = MessageBus(cfg.network, np.random.default_rng(derive_seed(seed, "network")), dt)
    consensus = Consensus(cfg.consensus)
    period = cfg.network.report_period_steps
    verdicts: list[str] = []
    current = "none"
    snitch_time = 0.0
    perf = time.perf_counter
    error = None

    try:
        for k in range(1, n + 1):
            t = k * dt
            report_now = k % period == 0
            for nd in nodes:
                node = nd["id"]
                qs_clean = nd["sp"][k - 1]
                qs = apply_attack(attack, node, "q_setpoint", qs_clean, None, t) if nd["attack_sp"] else qs_clean
                state, tel = plant_step(
                    nd["state"], ControllerInputs(qs, nd["fb_v"], nd["fb_q"]), nd["params"], nd["noise"][k - 1]
                )
                nd["state"] = state
                v_m, i_m, q_m = tel.v_g_meas, tel.i_g_meas, tel.q_g_meas
                if nd["attack_meas"]:
                    vals = {"v_meas": v_m, "q_meas": q_m, "i_meas": i_m}
                    for ch in nd["attack_meas"]:
                        hist = nd["histories"].get(ch)
                        if hist is not None:
                            hist.push(vals[ch])
                        vals[ch] = apply_attack(attack, node, ch, vals[ch], hist, t)
                    v_m, q_m, i_m = vals["v_meas"], vals["q_meas"], vals["i_meas"]
                nd["fb_v"], nd["fb_q"] = v_m, q_m

                t0 = perf()
                twin = nd["twin"]
                pred = twin.twin_step(qs_clean)
                if twin.state.step != state.step:
                    raise SimulationError("twin lost lockstep with plant", k, module="twin")
                r, tau, hit, alarm = twin.observe(q_m if nd["use_q"] else v_m)
                snitch_time += perf() - t0

                rec = nd["rec"]
                rec["v_true"].append(tel.v_g_true)
                rec["v_meas"].append(v_m)
                rec["q_true"].append(tel.q_g_true)
                rec["q_meas"].append(q_m)
                rec["i_true"].append(tel.i_g_true)
                rec["i_meas"].append(i_m)
                rec["qs_recv"].append(qs)
                rec["qs_clean"].append(qs_clean)
                rec["twin_pred"].append(pred)
                rec["twin_q"].append(twin.state.q_g)
                rec["residual"].append(r)
                rec["tau"].append(tau)
                rec["hit"].append(hit)
                rec["local_alarm"].append(alarm)
                if report_now and consensus_on:
                    bus.send(TrustReport(node, k, tau, alarm))
            if consensus_on:
                for rep in bus.deliver_until(k):
                    consensus.receive(rep)
                if report_now:
                    current = consensus.evaluate(k).label()
            verdicts.append(current)
    except SimulationError as exc:
        error = str(exc)
        n = len(verdicts)

    traces = {}
    for nd, nc in zip(nodes, cfg.nodes):
        arrays = {}
        for key, vals in nd["rec"].items():
            vals = vals[:n]
            dtype = bool if key in ("hit", "local_alarm") else float
            arrays[key] = np.asarray(vals, dtype=dtype)
        t_on = attack.onset_for(nc.id)
        onset = None if t_on is None else onset_index(t_on, dt)
        truth = np.zeros(n, dtype=bool)
        if onset is not None and onset < n:
            truth[onset:] = True
        p = nc.params
        q_ref = np.clip(arrays["qs_clean"] + p.k_droop * (p.v_nom - arrays["v_true"]), p.q_min, p.q_max)
        traces[nc.id] = NodeTrace(nc.id, arrays, truth, onset, q_ref)

    return SimResult(
        cfg=cfg,
        attack=attack,
        n_steps=n,
        nodes=traces,
        verdicts=verdicts,
        consensus=consensus,
        reports_sent=bus.sent,
        reports_dropped=bus.dropped,
        snitch_time_s=snitch_time,
        error=error,
        meta={"node_order": ids},
    )
