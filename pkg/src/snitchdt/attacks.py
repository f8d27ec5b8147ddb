"""False-data injection on the channels between sensors/setpoints and the controller.

Attacks are declarative (:class:`AttackSpec`) and applied per (node, channel,
step) by :func:`apply_attack`.  Delay attacks read from a
:class:`ChannelHistory` of clean values owned by the scenario loop.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Any, Mapping

KINDS = ("none", "bias", "ramp", "delay", "coordinated")
CHANNELS = ("q_setpoint", "v_meas", "q_meas", "i_meas")
FEEDBACK_CHANNELS = ("v_meas", "q_meas")

DEFAULT_CHANNELS = {
    "bias": ("q_setpoint",),
    "ramp": ("q_setpoint",),
    "delay": FEEDBACK_CHANNELS,
}

# onset comparisons are done in seconds; this absorbs k*dt rounding
_T_EPS = 1e-12


class AttackConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    node: str | None = None
    channels: tuple[str, ...] = ()
    t_start: float = 0.0
    magnitude: float = 0.0
    slope: float = 0.0
    delay_s: float = 0.0
    components: tuple["AttackSpec", ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise AttackConfigError(f"attack.kind: unknown kind {self.kind!r}")
        if not self.channels and self.kind in DEFAULT_CHANNELS:
            object.__setattr__(self, "channels", DEFAULT_CHANNELS[self.kind])
        for ch in self.channels:
            if ch not in CHANNELS:
                raise AttackConfigError(f"attack.channel: unknown channel {ch!r}")
        if not math.isfinite(self.t_start) or self.t_start < 0:
            raise AttackConfigError("attack.t_start must be >= 0")
        if not math.isfinite(self.delay_s) or self.delay_s < 0:
            raise AttackConfigError("attack.delay_s must be >= 0")
        if self.kind == "coordinated":
            if len(self.components) < 2:
                raise AttackConfigError("attack.components: coordinated needs >= 2 components")
            if len({c.node for c in self.components}) < 2:
                raise AttackConfigError("attack.components: coordinated needs >= 2 distinct nodes")
            for c in self.components:
                if c.kind in ("none", "coordinated"):
                    raise AttackConfigError(f"attack.components: nested kind {c.kind!r} not allowed")
        elif self.components:
            raise AttackConfigError("attack.components: only coordinated attacks have components")
        if self.kind in ("bias", "ramp", "delay") and self.node is None:
            raise AttackConfigError("attack.node is required")
        if self.kind == "bias" and self.magnitude == 0:
            raise AttackConfigError("attack.magnitude must be nonzero for bias")
        if self.kind == "ramp" and self.slope == 0:
            raise AttackConfigError("attack.slope must be nonzero for ramp")
        if self.kind == "delay" and self.delay_s <= 0:
            raise AttackConfigError("attack.delay_s must be > 0 for delay")

    def leaves(self) -> tuple["AttackSpec", ...]:
        if self.kind == "coordinated":
            return self.components
        if self.kind == "none":
            return ()
        return (self,)

    def targets(self) -> set[str]:
        return {c.node for c in self.leaves()}

    def onset_for(self, node: str) -> float | None:
        starts = [c.t_start for c in self.leaves() if c.node == node]
        return min(starts) if starts else None

    def max_delay_s(self) -> float:
        return max((c.delay_s for c in self.leaves() if c.kind == "delay"), default=0.0)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind}
        if self.kind == "none":
            return d
        if self.kind == "coordinated":
            d["t_start"] = self.t_start
            d["components"] = [c.to_dict() for c in self.components]
            return d
        d.update(node=self.node, channel=list(self.channels), t_start=self.t_start)
        if self.kind == "bias":
            d["magnitude"] = self.magnitude
        elif self.kind == "ramp":
            d["slope"] = self.slope
        elif self.kind == "delay":
            d["delay_s"] = self.delay_s
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AttackSpec":
        allowed = {"kind", "node", "channel", "t_start", "magnitude", "slope", "delay_s", "components"}
        unknown = set(data) - allowed
        if unknown:
            raise AttackConfigError(f"attack: unknown keys {sorted(unknown)}")
        channel = data.get("channel", ())
        if isinstance(channel, str):
            channel = (channel,)
        comps = tuple(cls.from_dict(c) for c in data.get("components", ()))
        try:
            return cls(
                kind=data.get("kind", "none"),
                node=None if data.get("node") is None else str(data["node"]),
                channels=tuple(channel),
                t_start=float(data.get("t_start", min((c.t_start for c in comps), default=0.0))),
                magnitude=float(data.get("magnitude", 0.0)),
                slope=float(data.get("slope", 0.0)),
                delay_s=float(data.get("delay_s", 0.0)),
                components=comps,
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, AttackConfigError):
                raise
            raise AttackConfigError(f"attack: {exc}") from exc


NO_ATTACK = AttackSpec()


class ChannelHistory:
    """Ring buffer of clean samples for one channel.

    ``lookup(0)`` is the most recent push; lags past the recorded history
    return the oldest sample still held.
    """

    def __init__(self, capacity: int, dt: float):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.dt = dt
        self._buf: deque[float] = deque(maxlen=capacity)

    @classmethod
    def for_delay(cls, delay_s: float, dt: float) -> "ChannelHistory":
        return cls(math.ceil(delay_s / dt - 1e-9) + 1, dt)

    def push(self, value: float) -> None:
        self._buf.append(value)

    def lookup(self, lag: int) -> float:
        if not self._buf:
            raise IndexError("empty channel history")
        if lag < 0:
            raise ValueError("lag must be >= 0")
        if lag >= self.capacity:
            raise AttackConfigError(f"lag {lag} exceeds history capacity {self.capacity}")
        n = len(self._buf)
        return self._buf[-1 - lag] if lag < n else self._buf[0]

    def __len__(self) -> int:
        return len(self._buf)


def delay_lag_steps(delay_s: float, dt: float) -> int:
    return int(round(delay_s / dt))


def check_history_capacity(spec: AttackSpec, capacity: int, dt: float) -> None:
    """Build-time check so a delay attack can never outrun its buffer."""
    for c in spec.leaves():
        if c.kind == "delay" and delay_lag_steps(c.delay_s, dt) >= capacity:
            raise AttackConfigError(
                f"attack.delay_s: lag {delay_lag_steps(c.delay_s, dt)} steps exceeds history capacity {capacity}"
            )


def apply_attack(
    spec: AttackSpec,
    node: str,
    channel: str,
    clean: float,
    history: ChannelHistory | None,
    t: float,
) -> float:
    """Value seen downstream of ``channel`` at ``node`` and time ``t``.

    For delay attacks ``history`` must already hold the clean sample of the
    current step.
    """
    kind = spec.kind
    if kind == "none":
        return clean
    if kind == "coordinated":
        for comp in spec.components:
            if comp.node == node and channel in comp.channels:
                return apply_attack(comp, node, channel, clean, history, t)
        return clean
    if spec.node != node or channel not in spec.channels:
        return clean
    if t < spec.t_start - _T_EPS:
        return clean
    if kind == "bias":
        return clean + spec.magnitude
    if kind == "ramp":
        return clean + spec.slope * max(0.0, t - spec.t_start)
    # delay
    if history is None:
        raise AttackConfigError("delay attack needs a channel history")
    return history.lookup(delay_lag_steps(spec.delay_s, history.dt))


def ground_truth(spec: AttackSpec, node: str, t: float) -> bool:
    return any(c.node == node and t >= c.t_start - _T_EPS for c in spec.leaves())


def attacked_channels(spec: AttackSpec, node: str) -> set[str]:
    out: set[str] = set()
    for c in spec.leaves():
        if c.node == node:
            out.update(c.channels)
    return out

