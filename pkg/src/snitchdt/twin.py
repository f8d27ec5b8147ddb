"""Per-node Snitch digital twin.

The twin runs a noise-free replica of the node's plant, driven only by the
operator-intended setpoint schedule.  The gap between what the node reports
and what the replica predicts is the residual; residuals feed a threshold
alarm and a rolling trust score.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .plant import (
    ControllerInputs,
    PlantParams,
    PlantState,
    SimulationError,
    initial_state,
    plant_step,
)

SIGMA_SQ_FLOOR = 1e-12
MIN_CALIBRATION_SAMPLES = 1000
MONITORED_CHANNELS = ("q_g", "v_g")


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class TwinConfig:
    epsilon: float | None = None
    sigma_sq: float | None = None
    window_s: float = 0.05
    monitored_channel: str = "q_g"
    sustain_m: int = 5

    def __post_init__(self) -> None:
        if self.epsilon is not None and not (math.isfinite(self.epsilon) and self.epsilon > 0):
            raise ValueError("twin.epsilon must be > 0")
        if self.sigma_sq is not None and not (math.isfinite(self.sigma_sq) and self.sigma_sq >= SIGMA_SQ_FLOOR):
            raise ValueError(f"twin.sigma_sq must be >= {SIGMA_SQ_FLOOR}")
        if not self.window_s > 0:
            raise ValueError("twin.window_s must be > 0")
        if self.monitored_channel not in MONITORED_CHANNELS:
            raise ValueError(f"twin.monitored_channel must be one of {MONITORED_CHANNELS}")
        if self.sustain_m < 1:
            raise ValueError("twin.sustain_m must be >= 1")

    @property
    def calibrated(self) -> bool:
        return self.epsilon is not None and self.sigma_sq is not None

    def window_samples(self, dt: float) -> int:
        if self.window_s < dt * (1 - 1e-9):
            raise ValueError("twin.window_s must be >= dt")
        return max(1, int(round(self.window_s / dt)))


def residual(measured: float, predicted: float) -> float:
    if not (math.isfinite(measured) and math.isfinite(predicted)):
        raise SimulationError("non-finite residual input", module="twin")
    return measured - predicted


def detect(r: float, epsilon: float) -> bool:
    # strict: |r| == epsilon is not an anomaly
    return abs(r) > epsilon


class ResidualWindow:
    """Fixed-length buffer of recent residuals with a running sum of squares.

    The running sum is rebuilt from the buffer every ``refresh_every`` pushes
    so floating-point drift cannot accumulate.
    """

    def __init__(self, n: int, refresh_every: int = 1000):
        if n < 1:
            raise ValueError("window length must be >= 1")
        self.n = n
        self.refresh_every = refresh_every
        self.buffer: deque[float] = deque(maxlen=n)
        self.sum_sq = 0.0
        self._pushes = 0

    def push(self, r: float) -> None:
        buf = self.buffer
        if len(buf) == self.n:
            old = buf[0]
            self.sum_sq -= old * old
        buf.append(r)
        self.sum_sq += r * r
        self._pushes += 1
        if self._pushes % self.refresh_every == 0:
            self.refresh()
        elif self.sum_sq < 0.0:
            self.sum_sq = 0.0

    def refresh(self) -> None:
        self.sum_sq = math.fsum(r * r for r in self.buffer)

    def brute_sum_sq(self) -> float:
        return math.fsum(r * r for r in self.buffer)

    def __len__(self) -> int:
        return len(self.buffer)


def trust_score(window: ResidualWindow | Sequence[float], sigma_sq: float, n_window: int | None = None) -> float:
    """exp(-(1/n) * sum(r^2) / sigma^2) over the windowed residuals.

    ``n_window`` is the normaliser in samples.  The twin passes the full
    window length, so a partly filled window is not over-penalised; left out,
    it falls back to the number of residuals held.
    """
    if isinstance(window, ResidualWindow):
        count = len(window)
        sum_sq = window.sum_sq
    else:
        count = len(window)
        sum_sq = math.fsum(r * r for r in window)
    if count == 0:
        raise ValueError("trust score is undefined on an empty window")
    if not sigma_sq >= SIGMA_SQ_FLOOR:
        raise ValueError(f"sigma_sq must be >= {SIGMA_SQ_FLOOR}")
    n = count if n_window is None else n_window
    if n < 1:
        raise ValueError("n_window must be >= 1")
    return math.exp(-sum_sq / (n * sigma_sq))


def calibrate(healthy_residuals: Sequence[float] | np.ndarray) -> tuple[float, float]:
    """(sigma_sq, epsilon) from an attack-free residual series.

    sigma_sq is the sample variance floored at 1e-12; epsilon is
    mean(|r|) + 4 * std(r).
    """
    r = np.asarray(healthy_residuals, dtype=float)
    if r.ndim != 1 or r.size < MIN_CALIBRATION_SAMPLES:
        raise CalibrationError(
            f"need at least {MIN_CALIBRATION_SAMPLES} healthy residuals, got {r.size}"
        )
    if not np.all(np.isfinite(r)):
        raise CalibrationError("healthy residuals contain non-finite values")
    std = float(np.std(r, ddof=1))
    sigma_sq = max(std * std, SIGMA_SQ_FLOOR)
    epsilon = float(np.mean(np.abs(r))) + 4.0 * std
    if not epsilon > 0:
        raise CalibrationError("degenerate calibration: epsilon is zero (all residuals zero)")
    return sigma_sq, epsilon


class SnitchTwin:
    """Replica + residual bookkeeping for one node."""

    def __init__(self, params: PlantParams, cfg: TwinConfig, q_base0: float):
        if not cfg.calibrated:
            raise CalibrationError("twin needs epsilon and sigma_sq before it can run")
        # the replica never sees measurement noise
        self.params = params.with_(sigma_meas=0.0)
        self.cfg = cfg
        self.state: PlantState = initial_state(q_base0, self.params)
        self._fb_v = self.state.v_g
        self._fb_q = self.state.q_g
        self.window = ResidualWindow(cfg.window_samples(params.dt))
        self.run_length = 0
        self.failed = False
        self.predicted_output = self._output(self.state)

    @property
    def step(self) -> int:
        return self.state.step

    def _output(self, state: PlantState) -> float:
        return state.q_g if self.cfg.monitored_channel == "q_g" else state.v_g

    def twin_step(self, q_setpoint_clean: float) -> float:
        """Advance the replica one step on the clean reference; return the prediction."""
        if self.failed:
            self.state = PlantState(self.state.q_g, 0.0, self.state.v_g, self.state.i_g, self.state.step + 1)
            return self.predicted_output
        try:
            self.state, tel = plant_step(
                self.state, ControllerInputs(q_setpoint_clean, self._fb_v, self._fb_q), self.params
            )
        except SimulationError:
            self.failed = True
            self.state = PlantState(self.state.q_g, 0.0, self.state.v_g, self.state.i_g, self.state.step + 1)
            return self.predicted_output
        self._fb_v = tel.v_g_meas
        self._fb_q = tel.q_g_meas
        self.predicted_output = self._output(self.state)
        return self.predicted_output

    def observe(self, measured: float) -> tuple[float, float, bool, bool]:
        """Score one measurement against the latest prediction.

        Returns (residual, tau, detect flag, sustained local alarm).
        """
        if self.failed or not math.isfinite(measured):
            self.failed = True
            self.run_length += 1
            return math.nan, 0.0, True, self.run_length >= self.cfg.sustain_m
        r = measured - self.predicted_output
        self.window.push(r)
        tau = trust_score(self.window, self.cfg.sigma_sq, self.window.n)
        hit = abs(r) > self.cfg.epsilon
        self.run_length = self.run_length + 1 if hit else 0
        return r, tau, hit, self.run_length >= self.cfg.sustain_m
