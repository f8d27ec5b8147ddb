"""Scenario and suite configuration: JSON schema, defaults, validation, seeds.

Config files are strict: unknown keys are rejected and every invariant
violation raises :class:`ConfigError` naming the offending field.  The
resolved configuration serialises back (``to_dict``) to a document that
loads to an identical object.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .attacks import AttackConfigError, AttackSpec
from .baseline import TrainConfig
from .coordination import ConsensusConfig, NetworkConfig
from .plant import PlantParams
from .twin import TwinConfig

DEFAULT_NODE_IDS = ("bus1", "bus5", "bus21", "bus26")
DEFAULT_SETPOINT = 0.2
DETECTORS = ("snitch", "ann")

# filled in per attack kind when a config leaves them out
ATTACK_DEFAULTS: dict[str, dict[str, Any]] = {
    "bias": {"magnitude": 0.1, "t_start": 0.1},
    "ramp": {"slope": 0.5, "t_start": 0.1},
    "delay": {"delay_s": 0.02, "t_start": 0.2},
}


class ConfigError(ValueError):
    pass


def derive_seed(*parts: Any) -> int:
    """Stable unsigned 64-bit seed from an arbitrary tuple of tags."""
    blob = json.dumps([str(p) for p in parts], separators=(",", ":")).encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


def _strict(data: Mapping[str, Any], allowed: set[str], where: str) -> None:
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")


def _build(cls: type, data: Mapping[str, Any], where: str, base: Any = None) -> Any:
    names = {f.name for f in fields(cls)}
    _strict(data, names, where)
    try:
        if base is not None:
            return replace(base, **data)
        return cls(**data)
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        # dataclass validators already name the field; prefix the section
        raise ConfigError(f"{where}.{msg}" if not msg.startswith(where) else msg) from exc


@dataclass(frozen=True)
class AnnConfig:
    n_m: int = 20
    hidden: int = 16
    train: TrainConfig = field(default_factory=TrainConfig)
    train_duration_s: float = 2.0
    setpoint_range: tuple[float, float] = (0.0, 0.4)
    setpoint_hold_s: float = 0.4
    subsample: int = 4

    def __post_init__(self) -> None:
        if self.n_m < 1:
            raise ValueError("ann.n_m must be >= 1")
        if self.hidden < 1:
            raise ValueError("ann.hidden must be >= 1")
        if not self.train_duration_s > 0:
            raise ValueError("ann.train_duration_s must be > 0")
        lo, hi = self.setpoint_range
        if not lo < hi:
            raise ValueError("ann.setpoint_range must be increasing")
        if not self.setpoint_hold_s > 0:
            raise ValueError("ann.setpoint_hold_s must be > 0")
        if self.subsample < 1:
            raise ValueError("ann.subsample must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["setpoint_range"] = list(self.setpoint_range)
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AnnConfig":
        _strict(data, {f.name for f in fields(cls)}, "ann")
        d = dict(data)
        if "train" in d:
            d["train"] = _build(TrainConfig, d["train"], "ann.train")
        if "setpoint_range" in d:
            d["setpoint_range"] = tuple(float(x) for x in d["setpoint_range"])
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class NodeConfig:
    id: str
    params: PlantParams
    setpoints: tuple[tuple[float, float], ...] = ((0.0, DEFAULT_SETPOINT),)
    twin: TwinConfig = field(default_factory=TwinConfig)

    def __post_init__(self) -> None:
        if not self.setpoints:
            raise ValueError("setpoints must not be empty")
        times = [t for t, _ in self.setpoints]
        if times[0] != 0.0:
            raise ValueError("setpoints must start at t=0")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("setpoints times must be strictly increasing")
        for _, q in self.setpoints:
            if not math.isfinite(q):
                raise ValueError("setpoints values must be finite")

    def setpoint_at(self, t: float) -> float:
        q = self.setpoints[0][1]
        for ts, qs in self.setpoints:
            if t >= ts - 1e-12:
                q = qs
            else:
                break
        return q

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "params": asdict(self.params),
            "setpoints": [list(p) for p in self.setpoints],
            "twin": asdict(self.twin),
        }


@dataclass(frozen=True)
class ScenarioConfig:
    scenario_id: str
    duration_s: float = 1.0
    dt: float = 1e-4
    nodes: tuple[NodeConfig, ...] = ()
    attack: AttackSpec = field(default_factory=AttackSpec)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)
    detectors: tuple[str, ...] = DETECTORS
    master_seed: int = 0
    calibration_s: float = 0.5
    ann: AnnConfig = field(default_factory=AnnConfig)
    trace_every: int = 1

    def __post_init__(self) -> None:
        # canonical order so listing detectors differently cannot change any output
        dets = tuple(self.detectors)
        unknown = [d for d in dets if d not in DETECTORS]
        if unknown:
            raise ConfigError(f"detectors: unknown detector {unknown[0]!r}")
        if len(set(dets)) != len(dets):
            raise ConfigError("detectors: duplicate entry")
        object.__setattr__(self, "detectors", tuple(d for d in DETECTORS if d in dets))

    @property
    def n_steps(self) -> int:
        return int(round(self.duration_s / self.dt))

    @property
    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def node(self, node_id: str) -> NodeConfig:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def validate(self) -> "ScenarioConfig":
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigError("dt must be > 0")
        if not (self.duration_s > 0 and math.isfinite(self.duration_s)):
            raise ConfigError("duration_s must be > 0")
        ratio = self.duration_s / self.dt
        if abs(ratio - round(ratio)) > 1e-6 * max(1.0, ratio):
            raise ConfigError("duration_s must be an integer multiple of dt")
        if not self.nodes:
            raise ConfigError("nodes must not be empty")
        ids = self.node_ids
        if len(set(ids)) != len(ids):
            raise ConfigError("nodes: node ids must be unique")
        for n in self.nodes:
            if abs(n.params.dt - self.dt) > 1e-15:
                raise ConfigError(f"nodes[{n.id}].params.dt must equal the scenario dt")
            try:
                n.twin.window_samples(self.dt)
            except ValueError as exc:
                raise ConfigError(f"nodes[{n.id}].{exc}") from exc
        for leaf in self.attack.leaves():
            if leaf.node not in ids:
                raise ConfigError(f"attack.node: unknown node {leaf.node!r}")
        for d in self.detectors:
            if d not in DETECTORS:
                raise ConfigError(f"detectors: unknown detector {d!r}")
        if not 0 <= self.master_seed < 2**64:
            raise ConfigError("master_seed must be an unsigned 64-bit integer")
        if self.calibration_s * (1 - 1e-9) < 1000 * self.dt:
            raise ConfigError("calibration_s must cover at least 1000 steps")
        if self.trace_every < 1:
            raise ConfigError("trace_every must be >= 1")
        return self

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario_id": self.scenario_id,
            "duration_s": self.duration_s,
            "dt": self.dt,
            "nodes": [n.to_dict() for n in self.nodes],
            "attack": self.attack.to_dict(),
            "network": asdict(self.network),
            "consensus": asdict(self.consensus),
            "detectors": list(self.detectors),
            "master_seed": self.master_seed,
            "calibration_s": self.calibration_s,
            "ann": self.ann.to_dict(),
            "trace_every": self.trace_every,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_attack(self, attack: AttackSpec, scenario_id: str | None = None) -> "ScenarioConfig":
        return replace(self, attack=attack, scenario_id=scenario_id or self.scenario_id).validate()

    def with_twins(self, twins: Mapping[str, TwinConfig]) -> "ScenarioConfig":
        nodes = tuple(replace(n, twin=twins.get(n.id, n.twin)) for n in self.nodes)
        return replace(self, nodes=nodes)


SCENARIO_KEYS = {
    "scenario_id", "duration_s", "dt", "nodes", "plant", "twin", "attack", "network", "consensus",
    "detectors", "master_seed", "calibration_s", "ann", "trace_every",
}
NODE_KEYS = {"id", "params", "setpoints", "twin"}


def resolve_attack(data: Mapping[str, Any] | None, node_ids: list[str]) -> AttackSpec:
    data = dict(data or {})
    kind = data.get("kind", "none")
    if kind in ATTACK_DEFAULTS:
        data = {**ATTACK_DEFAULTS[kind], **data}
        data.setdefault("node", node_ids[0])
    elif kind == "coordinated" and "components" not in data:
        if len(node_ids) < 3:
            raise ConfigError("attack.components: required with fewer than 3 nodes")
        data["components"] = [
            {"kind": "bias", "node": node_ids[0], "magnitude": 0.1, "t_start": 0.1},
            {"kind": "bias", "node": node_ids[2], "magnitude": 0.1, "t_start": 0.15},
        ]
    if kind == "coordinated":
        comps = []
        for c in data["components"]:
            ck = c.get("kind", "bias") if isinstance(c, Mapping) else None
            if ck in ATTACK_DEFAULTS:
                c = {**ATTACK_DEFAULTS[ck], **c}
            comps.append(c)
        data["components"] = comps
    try:
        return AttackSpec.from_dict(data)
    except AttackConfigError as exc:
        raise ConfigError(str(exc)) from exc


def scenario_from_dict(data: Mapping[str, Any]) -> ScenarioConfig:
    _strict(data, SCENARIO_KEYS, "config")
    if "scenario_id" not in data:
        raise ConfigError("scenario_id is required")
    dt = float(data.get("dt", 1e-4))
    if not dt > 0:
        raise ConfigError("dt must be > 0")

    plant_base = _build(PlantParams, {**data.get("plant", {}), "dt": dt}, "plant")
    twin_base = _build(TwinConfig, data.get("twin", {}), "twin")

    raw_nodes = data.get("nodes")
    if raw_nodes is None:
        raw_nodes = [{"id": nid} for nid in DEFAULT_NODE_IDS]
    if not isinstance(raw_nodes, list) or not raw_nodes:
        raise ConfigError("nodes must be a non-empty list")
    nodes = []
    for i, rn in enumerate(raw_nodes):
        where = f"nodes[{i}]"
        _strict(rn, NODE_KEYS, where)
        if "id" not in rn:
            raise ConfigError(f"{where}.id is required")
        node_params = {**rn.get("params", {})}
        if "dt" in node_params and float(node_params["dt"]) != dt:
            raise ConfigError(f"{where}.params.dt must equal the scenario dt")
        node_params["dt"] = dt
        params = _build(PlantParams, node_params, f"{where}.params", base=plant_base)
        twin = _build(TwinConfig, rn.get("twin", {}), f"{where}.twin", base=twin_base)
        sp = rn.get("setpoints", [[0.0, DEFAULT_SETPOINT]])
        try:
            setpoints = tuple((float(t), float(q)) for t, q in sp)
            nodes.append(NodeConfig(str(rn["id"]), params, setpoints, twin))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}.setpoints: {exc}") from exc

    node_ids = [n.id for n in nodes]
    try:
        cfg = ScenarioConfig(
            scenario_id=str(data["scenario_id"]),
            duration_s=float(data.get("duration_s", 1.0)),
            dt=dt,
            nodes=tuple(nodes),
            attack=resolve_attack(data.get("attack"), node_ids),
            network=_build(NetworkConfig, data.get("network", {}), "network"),
            consensus=_build(ConsensusConfig, data.get("consensus", {}), "consensus"),
            detectors=tuple(data.get("detectors", DETECTORS)),
            master_seed=int(data.get("master_seed", 0)),
            calibration_s=float(data.get("calibration_s", 0.5)),
            ann=AnnConfig.from_dict(data.get("ann", {})),
            trace_every=int(data.get("trace_every", 1)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def load_config(path: str | Path) -> ScenarioConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return scenario_from_dict(data)


@dataclass(frozen=True)
class VariationRanges:
    onset_s: tuple[float, float] = (0.1, 0.3)
    bias_magnitude: tuple[float, float] = (0.05, 0.15)
    ramp_slope: tuple[float, float] = (0.25, 1.0)
    delay_s: tuple[float, float] = (0.015, 0.03)
    coordinated_stagger_s: tuple[float, float] = (0.0, 0.1)
    allow_negative: bool = True
    nodes: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        for name in ("onset_s", "bias_magnitude", "ramp_slope", "delay_s", "coordinated_stagger_s"):
            lo, hi = getattr(self, name)
            if not (0 <= lo <= hi):
                raise ValueError(f"ranges.{name} must satisfy 0 <= low <= high")
        if self.bias_magnitude[0] == 0 or self.ramp_slope[0] == 0 or self.delay_s[0] == 0:
            raise ValueError("ranges: magnitude, slope and delay ranges must exclude zero")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


SUITE_KEYS = {"suite_id", "attack_types", "scenarios_per_type", "master_seed", "base", "base_config", "ranges", "roc_points"}


@dataclass(frozen=True)
class SuiteSpec:
    suite_id: str = "default"
    attack_types: tuple[str, ...] = ("none", "bias", "ramp", "delay")
    scenarios_per_type: int = 10
    master_seed: int = 0
    base: ScenarioConfig = field(default_factory=lambda: scenario_from_dict({"scenario_id": "base", "trace_every": 10}))
    ranges: VariationRanges = field(default_factory=VariationRanges)
    roc_points: int = 200

    def __post_init__(self) -> None:
        if self.scenarios_per_type < 1:
            raise ValueError("scenarios_per_type must be >= 1")
        for a in self.attack_types:
            if a not in ("none", "bias", "ramp", "delay", "coordinated"):
                raise ValueError(f"attack_types: unknown attack type {a!r}")
        if "coordinated" in self.attack_types and len(self.base.nodes) < 2:
            raise ValueError("attack_types: coordinated needs at least two nodes")
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must be an unsigned 64-bit integer")

    def to_dict(self) -> dict[str, Any]:
        return {
            "suite_id": self.suite_id,
            "attack_types": list(self.attack_types),
            "scenarios_per_type": self.scenarios_per_type,
            "master_seed": self.master_seed,
            "base": self.base.to_dict(),
            "ranges": self.ranges.to_dict(),
            "roc_points": self.roc_points,
        }


def suite_from_dict(data: Mapping[str, Any], root: Path | None = None) -> SuiteSpec:
    _strict(data, SUITE_KEYS, "suite")
    if "base" in data and "base_config" in data:
        raise ConfigError("suite: give either base or base_config, not both")
    if "base_config" in data:
        path = Path(data["base_config"])
        if root is not None and not path.is_absolute():
            path = root / path
        base = load_config(path)
    else:
        base_data = {"scenario_id": "base", "trace_every": 10, **data.get("base", {})}
        base = scenario_from_dict(base_data)
    ranges_data = dict(data.get("ranges", {}))
    _strict(ranges_data, {f.name for f in fields(VariationRanges)}, "suite.ranges")
    try:
        for k, v in list(ranges_data.items()):
            if isinstance(v, list):
                ranges_data[k] = tuple(v)
        ranges = VariationRanges(**ranges_data)
        if ranges.nodes is not None:
            missing = set(ranges.nodes) - set(base.node_ids)
            if missing:
                raise ValueError(f"ranges.nodes: unknown node(s) {sorted(missing)}")
        return SuiteSpec(
            suite_id=str(data.get("suite_id", "default")),
            attack_types=tuple(data.get("attack_types", ("none", "bias", "ramp", "delay"))),
            scenarios_per_type=int(data.get("scenarios_per_type", 10)),
            master_seed=int(data.get("master_seed", 0)),
            base=base,
            ranges=ranges,
            roc_points=int(data.get("roc_points", 200)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"suite: {exc}") from exc


def load_suite(path: str | Path) -> SuiteSpec:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"suite file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"suite is not valid JSON: {exc}") from exc
    return suite_from_dict(data, root=path.parent)
