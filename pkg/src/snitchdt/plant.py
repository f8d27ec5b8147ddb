"""Reduced-order grid-side converter model for one wind generator node.

The same model drives both the physical plant and the digital twin replica:
a static voltage sensitivity to injected reactive power, a first-order
converter lag, and a PI loop tracking a Q-V droop reference.  Everything is
per-unit and advanced with forward Euler at a fixed step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import NamedTuple


class SimulationError(RuntimeError):
    """Fatal numerical failure inside a scenario loop."""

    def __init__(self, message: str, step: int | None = None, module: str = "plant"):
        self.step = step
        self.module = module
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"{module}: {message}{where}")


@dataclass(frozen=True)
class PlantParams:
    v_nom: float = 1.0
    k_q: float = 0.05
    t_c: float = 0.02
    kp: float = 1.0
    ki: float = 150.0
    k_droop: float = 2.0
    q_min: float = -0.5
    q_max: float = 0.5
    p_fixed: float = 0.8
    sigma_meas: float = 1e-3
    dt: float = 1e-4

    def __post_init__(self) -> None:
        for f in fields(self):
            if not math.isfinite(getattr(self, f.name)):
                raise ValueError(f"{f.name} must be finite")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if self.t_c <= 0:
            raise ValueError("t_c must be > 0")
        if self.q_min >= self.q_max:
            raise ValueError("q_min must be < q_max")
        if self.sigma_meas < 0:
            raise ValueError("sigma_meas must be >= 0")
        if self.v_nom <= 0:
            raise ValueError("v_nom must be > 0")

    def with_(self, **changes) -> "PlantParams":
        return replace(self, **changes)


@dataclass(frozen=True, slots=True)
class PlantState:
    q_g: float
    pi_integrator: float
    v_g: float
    i_g: float
    step: int = 0


class ControllerInputs(NamedTuple):
    """What the converter controller consumes on one step (post-attack)."""

    q_setpoint: float
    v_meas: float
    q_meas: float


class NodeTelemetry(NamedTuple):
    step: int
    v_g_meas: float
    i_g_meas: float
    q_g_meas: float
    q_setpoint_received: float
    v_g_true: float
    q_g_true: float
    i_g_true: float


def terminal_voltage(q_g: float, params: PlantParams) -> float:
    return params.v_nom + params.k_q * q_g


def apparent_current(p: float, q: float, v: float) -> float:
    if not v > 0:
        raise ValueError(f"terminal voltage must be positive, got {v!r}")
    return math.hypot(p, q) / v


def _clamp(x: float, lo: float, hi: float) -> float:
    return lo if x < lo else hi if x > hi else x


def droop_reference(v_meas: float, q_base: float, params: PlantParams) -> float:
    """Q-V droop: more reactive power when the voltage sags below nominal."""
    q = q_base + params.k_droop * (params.v_nom - v_meas)
    return _clamp(q, params.q_min, params.q_max)


def equilibrium_q(q_base: float, params: PlantParams) -> float:
    """Reactive power at which the droop reference equals the delivered output.

    Solves q = q_base + k_droop*(v_nom - v(q)) with v(q) = v_nom + k_q*q, then
    clamps to the converter limits.
    """
    q = q_base / (1.0 + params.k_droop * params.k_q)
    return _clamp(q, params.q_min, params.q_max)


def initial_state(q_base: float, params: PlantParams) -> PlantState:
    """Steady state for a constant setpoint, zero integrator."""
    q = equilibrium_q(q_base, params)
    v = terminal_voltage(q, params)
    return PlantState(q, 0.0, v, apparent_current(params.p_fixed, q, v), 0)


def plant_step(
    state: PlantState,
    inputs: ControllerInputs,
    params: PlantParams,
    noise: tuple[float, float, float] = (0.0, 0.0, 0.0),
) -> tuple[PlantState, NodeTelemetry]:
    """Advance one Euler step and sample the new terminal quantities.

    ``noise`` holds standard-normal draws for the (v, i, q) sensors; they are
    scaled by ``params.sigma_meas`` here so a zero-noise plant and a noisy
    plant consume identical inputs.
    """
    q_set, v_fb, q_fb = inputs
    if not (math.isfinite(q_set) and math.isfinite(v_fb) and math.isfinite(q_fb)):
        raise SimulationError("non-finite controller input", state.step + 1)

    dt = params.dt
    q_ref = droop_reference(v_fb, q_set, params)
    err = q_ref - q_fb
    integ = state.pi_integrator + params.ki * err * dt
    q_cmd = q_ref + params.kp * err + integ
    # conditional integration: hold the integrator while it pushes into a limit
    if q_cmd > params.q_max:
        q_cmd = params.q_max
        if err > 0:
            integ = state.pi_integrator
    elif q_cmd < params.q_min:
        q_cmd = params.q_min
        if err < 0:
            integ = state.pi_integrator

    q_g = state.q_g + dt * (q_cmd - state.q_g) / params.t_c
    q_g = _clamp(q_g, params.q_min, params.q_max)
    if not (math.isfinite(q_g) and math.isfinite(integ)):
        raise SimulationError("non-finite plant state", state.step + 1)

    v_g = params.v_nom + params.k_q * q_g
    if not v_g > 0:
        raise SimulationError("terminal voltage collapsed", state.step + 1)
    i_g = math.hypot(params.p_fixed, q_g) / v_g
    step = state.step + 1
    new_state = PlantState(q_g, integ, v_g, i_g, step)

    s = params.sigma_meas
    nv, ni, nq = noise
    telemetry = NodeTelemetry(
        step,
        v_g + s * nv,
        i_g + s * ni,
        q_g + s * nq,
        q_set,
        v_g,
        q_g,
        i_g,
    )
    return new_state, telemetry
