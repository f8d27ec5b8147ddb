"""Trust-report network and the consensus verdict over it.

Every node periodically broadcasts a :class:`TrustReport`.  Reports travel
through a seeded latency/drop model into one event queue; the queue is
drained in ``(delivery_step, sender, seq)`` order, so every run with the same
seeds sees the same delivery schedule.  The mesh is full and evaluation is
logically central: all peers would compute the same verdict from the same
report set.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

TRUST_FLOOR = 1e-12


@dataclass(frozen=True, slots=True)
class TrustReport:
    node: str
    sent_step: int
    tau: float
    local_alarm: bool

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau!r}")
        if self.sent_step < 0:
            raise ValueError("sent_step must be >= 0")


@dataclass(frozen=True)
class NetworkConfig:
    report_period_steps: int = 10
    latency_mean_s: float = 1e-3
    latency_jitter_s: float = 5e-4
    drop_prob: float = 0.0

    def __post_init__(self) -> None:
        if self.report_period_steps < 1:
            raise ValueError("network.report_period_steps must be >= 1")
        if not (self.latency_mean_s >= 0 and math.isfinite(self.latency_mean_s)):
            raise ValueError("network.latency_mean_s must be >= 0")
        if not (self.latency_jitter_s >= 0 and math.isfinite(self.latency_jitter_s)):
            raise ValueError("network.latency_jitter_s must be >= 0")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("network.drop_prob must lie in [0, 1]")


@dataclass(frozen=True)
class ConsensusConfig:
    tau_alarm: float = 0.1
    quorum_k: int = 2
    coincidence_window_steps: int = 1000
    staleness_limit_steps: int = 500

    def __post_init__(self) -> None:
        if not 0.0 < self.tau_alarm < 1.0:
            raise ValueError("consensus.tau_alarm must lie in (0, 1)")
        if self.quorum_k < 2:
            raise ValueError("consensus.quorum_k must be >= 2")
        if self.coincidence_window_steps < 1:
            raise ValueError("consensus.coincidence_window_steps must be >= 1")
        if self.staleness_limit_steps < 0:
            raise ValueError("consensus.staleness_limit_steps must be >= 0")


@dataclass(frozen=True)
class SystemVerdict:
    kind: str
    implicated_nodes: frozenset[str]
    decided_step: int

    def __post_init__(self) -> None:
        n = len(self.implicated_nodes)
        if self.kind == "none" and n:
            raise ValueError("a 'none' verdict implicates no nodes")
        if self.kind == "local" and n != 1:
            raise ValueError("a 'local' verdict implicates exactly one node")
        if self.kind == "coordinated" and n < 2:
            raise ValueError("a 'coordinated' verdict implicates at least two nodes")
        if self.kind not in ("none", "local", "coordinated"):
            raise ValueError(f"unknown verdict kind {self.kind!r}")

    def label(self) -> str:
        if self.kind == "none":
            return "none"
        return f"{self.kind}:" + "|".join(sorted(self.implicated_nodes))


@dataclass
class Evaluation:
    """Outcome of one consensus evaluation."""

    step: int
    verdicts: list[SystemVerdict]
    stale_nodes: frozenset[str] = frozenset()
    blind: bool = False
    aggregate: float | None = None

    def label(self) -> str:
        return ";".join(v.label() for v in self.verdicts)

    @property
    def kinds(self) -> set[str]:
        return {v.kind for v in self.verdicts}


def schedule_delivery(
    report: TrustReport, net: NetworkConfig, rng: np.random.Generator, dt: float
) -> int | None:
    """Delivery step for ``report``, or None when the network drops it.

    The drop draw is always consumed first so the random stream advances the
    same way regardless of the outcome.
    """
    dropped = rng.random() < net.drop_prob
    latency = net.latency_mean_s
    if net.latency_jitter_s > 0:
        latency = rng.normal(net.latency_mean_s, net.latency_jitter_s)
    if dropped:
        return None
    return report.sent_step + int(round(max(0.0, latency) / dt))


class MessageBus:
    """Global event queue keyed by (delivery_step, sender, seq)."""

    def __init__(self, net: NetworkConfig, rng: np.random.Generator, dt: float):
        self.net = net
        self.rng = rng
        self.dt = dt
        self._heap: list[tuple[int, str, int, TrustReport]] = []
        self._seq = 0
        self.sent = 0
        self.dropped = 0

    def send(self, report: TrustReport) -> None:
        self.sent += 1
        when = schedule_delivery(report, self.net, self.rng, self.dt)
        if when is None:
            self.dropped += 1
            return
        heapq.heappush(self._heap, (when, report.node, self._seq, report))
        self._seq += 1

    def deliver_until(self, step: int) -> list[TrustReport]:
        out = []
        heap = self._heap
        while heap and heap[0][0] <= step:
            out.append(heapq.heappop(heap)[3])
        return out

    def __len__(self) -> int:
        return len(self._heap)


def aggregate_trust(latest: Mapping[str, float] | Iterable[float]) -> float:
    """Geometric mean of trust scores, each floored at 1e-12."""
    values = list(latest.values()) if isinstance(latest, Mapping) else list(latest)
    if not values:
        raise ValueError("no trust scores to aggregate")
    logs = [math.log(min(1.0, max(TRUST_FLOOR, v))) for v in values]
    return math.exp(math.fsum(logs) / len(logs))


def _largest_coincident_group(onsets: Mapping[str, int], window: int) -> list[str]:
    # nodes sorted by (onset, id); the widest run whose onset span fits the window
    order = sorted(onsets, key=lambda n: (onsets[n], n))
    best: list[str] = []
    lo = 0
    for hi in range(len(order)):
        while onsets[order[hi]] - onsets[order[lo]] > window:
            lo += 1
        if hi - lo + 1 > len(best):
            best = order[lo : hi + 1]
    return best


def classify(
    latest: Mapping[str, TrustReport],
    cfg: ConsensusConfig,
    now_step: int,
    onsets: Mapping[str, int] | None = None,
) -> Evaluation:
    """System verdict from the most recent report of each node.

    ``onsets`` maps a node to the sent step of the first report of its
    current alarm episode; when absent the latest report's step is used.
    """
    usable = {n: r for n, r in latest.items() if now_step - r.sent_step <= cfg.staleness_limit_steps}
    stale = frozenset(set(latest) - set(usable))
    if not usable:
        return Evaluation(now_step, [SystemVerdict("none", frozenset(), now_step)], stale, blind=True)

    aggregate = aggregate_trust({n: r.tau for n, r in usable.items()})
    alarmed = sorted(
        n
        for n, r in usable.items()
        if r.tau < cfg.tau_alarm and now_step - r.sent_step <= cfg.coincidence_window_steps
    )
    if not alarmed:
        verdicts = [SystemVerdict("none", frozenset(), now_step)]
    elif len(alarmed) == 1:
        verdicts = [SystemVerdict("local", frozenset(alarmed), now_step)]
    else:
        starts = {n: (onsets or {}).get(n, usable[n].sent_step) for n in alarmed}
        group = _largest_coincident_group(starts, cfg.coincidence_window_steps)
        if len(group) >= cfg.quorum_k:
            verdicts = [SystemVerdict("coordinated", frozenset(group), now_step)]
            verdicts += [SystemVerdict("local", frozenset([n]), now_step) for n in alarmed if n not in group]
        else:
            verdicts = [SystemVerdict("local", frozenset([n]), now_step) for n in alarmed]
    return Evaluation(now_step, verdicts, stale, aggregate=aggregate)


@dataclass
class Transition:
    step: int
    previous: str
    current: str


@dataclass
class Consensus:
    """Receiver-side state: latest report per node plus alarm-episode onsets."""

    cfg: ConsensusConfig
    latest: dict[str, TrustReport] = field(default_factory=dict)
    onsets: dict[str, int] = field(default_factory=dict)
    history: list[Evaluation] = field(default_factory=list)
    transitions: list[Transition] = field(default_factory=list)

    def receive(self, report: TrustReport) -> None:
        prev = self.latest.get(report.node)
        if prev is not None and report.sent_step <= prev.sent_step:
            return  # overtaken by a newer report
        self.latest[report.node] = report
        if report.tau < self.cfg.tau_alarm:
            if prev is None or prev.tau >= self.cfg.tau_alarm or report.node not in self.onsets:
                self.onsets[report.node] = report.sent_step
        else:
            self.onsets.pop(report.node, None)

    def evaluate(self, now_step: int) -> Evaluation:
        ev = classify(self.latest, self.cfg, now_step, self.onsets)
        previous = self.history[-1].label() if self.history else "none"
        if ev.label() != previous:
            self.transitions.append(Transition(now_step, previous, ev.label()))
        self.history.append(ev)
        return ev

    def first_step_with(self, kind: str) -> int | None:
        for ev in self.history:
            if kind in ev.kinds:
                return ev.step
        return None
