"""Windowed feedforward predictor used as the supervised baseline detector.

A one-hidden-layer tanh network maps the last ``n_m`` samples of terminal
voltage and current to a predicted reactive-power setpoint.  The detector
alarms when the measured reactive power strays from that prediction by more
than a calibrated threshold.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .plant import NodeTelemetry

N_SIGNALS = 2  # v_g, i_g


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int):
        self.epoch = epoch
        super().__init__(f"{message} (epoch {epoch})")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.02
    epochs: int = 40
    batch_size: int = 64
    seed: int = 0
    val_fraction: float = 0.2
    momentum: float = 0.9

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("ann.train.learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("ann.train.momentum must lie in [0, 1)")
        if self.epochs < 0:
            raise ValueError("ann.train.epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("ann.train.batch_size must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("ann.train.val_fraction must lie in (0, 1)")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class MlpParams:
    w1: np.ndarray  # (hidden, n_in)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden,)
    b2: float
    x_mean: np.ndarray = field(default=None)  # type: ignore[assignment]
    x_std: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.w1 = np.asarray(self.w1, dtype=float)
        self.b1 = np.asarray(self.b1, dtype=float)
        self.w2 = np.asarray(self.w2, dtype=float)
        self.b2 = float(self.b2)
        h, n_in = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape != (h,):
            raise ValueError("inconsistent MLP parameter shapes")
        if self.x_mean is None:
            self.x_mean = np.zeros(n_in)
        if self.x_std is None:
            self.x_std = np.ones(n_in)
        self.x_mean = np.asarray(self.x_mean, dtype=float)
        self.x_std = np.asarray(self.x_std, dtype=float)
        if self.x_mean.shape != (n_in,) or self.x_std.shape != (n_in,):
            raise ValueError("normalisation stats do not match the input size")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.w1.shape[1], self.w1.shape[0], 1]

    def copy(self) -> "MlpParams":
        return MlpParams(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2, self.x_mean.copy(), self.x_std.copy())

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.w1)) and np.all(np.isfinite(self.b1))
            and np.all(np.isfinite(self.w2)) and math.isfinite(self.b2)
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2, [self.b2]])

    def with_flat(self, theta: np.ndarray) -> "MlpParams":
        h, n = self.w1.shape
        i = 0
        w1 = theta[i : i + h * n].reshape(h, n); i += h * n
        b1 = theta[i : i + h]; i += h
        w2 = theta[i : i + h]; i += h
        return MlpParams(w1.copy(), b1.copy(), w2.copy(), float(theta[i]), self.x_mean, self.x_std)


def init_params(n_in: int, hidden: int, seed: int, w1_gain: float = 0.1) -> MlpParams:
    """Seeded Gaussian weights, zero biases.

    The small hidden-layer gain starts every tanh unit near its linear
    region, which keeps SGD from stalling on nearly linear targets.
    """
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, w1_gain / math.sqrt(n_in), size=(hidden, n_in))
    w2 = rng.normal(0.0, 1.0 / math.sqrt(hidden), size=hidden)
    return MlpParams(w1, np.zeros(hidden), w2, 0.0)


def build_features(v_g: Sequence[float], i_g: Sequence[float], n_m: int) -> np.ndarray:
    """Last ``n_m`` voltages followed by the last ``n_m`` currents, oldest first."""
    if n_m < 1:
        raise ValueError("n_m must be >= 1")
    if len(v_g) != len(i_g):
        raise ValueError("voltage and current histories differ in length")
    if len(v_g) < n_m:
        raise ValueError(f"need {n_m} samples of history, have {len(v_g)}")
    return np.concatenate([np.asarray(v_g[-n_m:], dtype=float), np.asarray(i_g[-n_m:], dtype=float)])


def features_from_telemetry(history: Sequence[NodeTelemetry], n_m: int) -> np.ndarray:
    """Feature window from a telemetry history, newest sample last."""
    tail = list(history[-n_m:]) if len(history) >= n_m else list(history)
    return build_features([t.v_g_meas for t in tail], [t.i_g_meas for t in tail], n_m)


def feature_matrix(v_g: np.ndarray, i_g: np.ndarray, n_m: int) -> np.ndarray:
    """Row k holds the window ending at sample k + n_m - 1."""
    v = np.lib.stride_tricks.sliding_window_view(np.asarray(v_g, dtype=float), n_m)
    i = np.lib.stride_tricks.sliding_window_view(np.asarray(i_g, dtype=float), n_m)
    return np.hstack([v, i])


def _check_input(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n_in = params.w1.shape[1]
    if x.shape[-1] != n_in or x.ndim not in (1, 2):
        raise ValueError(f"expected input of width {n_in}, got shape {x.shape}")
    return x


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray | float:
    x = _check_input(params, x)
    z = (x - params.x_mean) / params.x_std
    h = np.tanh(z @ params.w1.T + params.b1)
    y = h @ params.w2 + params.b2
    return float(y) if x.ndim == 1 else y


def loss_and_grads(params: MlpParams, x: np.ndarray, y: np.ndarray) -> tuple[float, MlpParams]:
    """Mean of 0.5*(prediction - target)^2 and its gradient w.r.t. every weight."""
    x = np.atleast_2d(_check_input(params, x))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    n = x.shape[0]
    z = (x - params.x_mean) / params.x_std
    h = np.tanh(z @ params.w1.T + params.b1)
    pred = h @ params.w2 + params.b2
    err = pred - y
    loss = 0.5 * float(err @ err) / n
    g_out = err / n
    gw2 = h.T @ g_out
    gb2 = float(g_out.sum())
    g_h = np.outer(g_out, params.w2) * (1.0 - h * h)
    gw1 = g_h.T @ z
    gb1 = g_h.sum(axis=0)
    return loss, MlpParams(gw1, gb1, gw2, gb2, params.x_mean, params.x_std)


def mse(params: MlpParams, x: np.ndarray, y: np.ndarray) -> float:
    err = np.asarray(forward(params, x)) - y
    return float(np.mean(err * err))


@dataclass
class TrainResult:
    params: MlpParams
    train_mse: list[float]
    val_mse: list[float]
    val_index: np.ndarray
    best_epoch: int

    @property
    def val_rmse(self) -> float:
        return math.sqrt(min(self.val_mse))


def train_sgd(
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    hidden: int = 16,
    init: MlpParams | None = None,
) -> TrainResult:
    """Mini-batch SGD on mean squared error with a held-out validation split.

    Features are z-scored with training-split statistics that travel with the
    returned parameters.  The parameters with the lowest validation error are
    kept, so the result is never worse on validation than the starting point.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or len(x) != len(y) or len(x) < 2:
        raise ValueError("dataset must be (n, n_in) features with n >= 2 targets")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(x))
    n_val = max(1, int(round(cfg.val_fraction * len(x))))
    val_idx, tr_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    xt, yt, xv, yv = x[tr_idx], y[tr_idx], x[val_idx], y[val_idx]

    if init is None:
        params = init_params(x.shape[1], hidden, cfg.seed)
        mean = xt.mean(axis=0)
        std = xt.std(axis=0)
        params.x_mean = mean
        params.x_std = np.where(std > 1e-12, std, 1.0)
    else:
        params = init.copy()

    best = params.copy()
    best_val = mse(params, xv, yv)
    train_curve = [mse(params, xt, yt)]
    val_curve = [best_val]
    best_epoch = 0
    lr, mu = cfg.learning_rate, cfg.momentum
    vel = np.zeros_like(params.flat())
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(len(xt))
        for start in range(0, len(xt), cfg.batch_size):
            b = perm[start : start + cfg.batch_size]
            _, g = loss_and_grads(params, xt[b], yt[b])
            # heavy-ball momentum on the flattened parameter vector
            vel = mu * vel - lr * g.flat()
            params = params.with_flat(params.flat() + vel)
        tr = mse(params, xt, yt)
        va = mse(params, xv, yv)
        if not (math.isfinite(tr) and math.isfinite(va) and params.is_finite()):
            raise TrainingError("training diverged", epoch)
        train_curve.append(tr)
        val_curve.append(va)
        if va < best_val:
            best_val, best, best_epoch = va, params.copy(), epoch
    return TrainResult(best, train_curve, val_curve, val_idx, best_epoch)


def ann_detect(q_g_meas: float, q_hat: float, epsilon_ann: float) -> bool:
    return abs(q_g_meas - q_hat) > epsilon_ann


@dataclass
class AnnModel:
    """Trained predictor plus the threshold and window it was calibrated with."""

    params: MlpParams
    n_m: int
    epsilon: float
    train_config: TrainConfig
    val_rmse: float = float("nan")

    def predict_series(self, v_g: np.ndarray, i_g: np.ndarray) -> np.ndarray:
        """Prediction per sample; NaN until the observation window fills."""
        out = np.full(len(v_g), np.nan)
        if len(v_g) >= self.n_m:
            out[self.n_m - 1 :] = forward(self.params, feature_matrix(v_g, i_g, self.n_m))
        return out

    def to_dict(self) -> dict:
        p = self.params
        return {
            "layer_sizes": p.layer_sizes,
            "activation": ["tanh", "identity"],
            "n_m": self.n_m,
            "feature_order": "v_g[t-n_m+1..t], i_g[t-n_m+1..t]",
            "w1": p.w1.ravel().tolist(),
            "b1": p.b1.tolist(),
            "w2": p.w2.tolist(),
            "b2": p.b2,
            "x_mean": p.x_mean.tolist(),
            "x_std": p.x_std.tolist(),
            "epsilon": self.epsilon,
            "val_rmse": self.val_rmse,
            "train_config": asdict(self.train_config),
            "train_config_hash": self.train_config.digest(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnnModel":
        n_in, hidden, _ = d["layer_sizes"]
        params = MlpParams(
            np.asarray(d["w1"]).reshape(hidden, n_in), d["b1"], d["w2"], d["b2"], d["x_mean"], d["x_std"]
        )
        return cls(params, int(d["n_m"]), float(d["epsilon"]), TrainConfig(**d["train_config"]), float(d["val_rmse"]))
