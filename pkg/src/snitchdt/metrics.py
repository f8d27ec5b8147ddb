"""Detector scoring: confusion-derived rates, F1, delay, tracking RMSE, ROC/AUC.

Undefined ratios (0/0) are returned as ``None`` and serialised as JSON null;
they are never silently coerced to zero.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, NamedTuple, Sequence

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


class BasicMetrics(NamedTuple):
    accuracy: float
    precision: float | None
    recall: float | None
    fpr: float | None
    fnr: float | None


def confusion(predicted: Sequence[bool], truth: Sequence[bool]) -> ConfusionCounts:
    p = np.asarray(predicted, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} predictions vs {t.shape} labels")
    return ConfusionCounts(
        tp=int(np.sum(p & t)),
        tn=int(np.sum(~p & ~t)),
        fp=int(np.sum(p & ~t)),
        fn=int(np.sum(~p & t)),
    )


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def basic_metrics(c: ConfusionCounts) -> BasicMetrics:
    if c.total == 0:
        raise ValueError("no samples to score")
    return BasicMetrics(
        accuracy=(c.tp + c.tn) / c.total,
        precision=_ratio(c.tp, c.tp + c.fp),
        recall=_ratio(c.tp, c.tp + c.fn),
        fpr=_ratio(c.fp, c.fp + c.tn),
        fnr=_ratio(c.fn, c.fn + c.tp),
    )


def f1_score(precision: float | None, recall: float | None) -> float | None:
    if precision is None or recall is None:
        return None
    if precision + recall == 0:
        return None
    return 2 * precision * recall / (precision + recall)


def sustained(flags: Sequence[bool] | np.ndarray, m: int) -> np.ndarray:
    """True at k when flags[k-m+1..k] are all true."""
    f = np.asarray(flags, dtype=bool)
    if m <= 1:
        return f.copy()
    run = np.zeros(len(f), dtype=np.int64)
    count = 0
    for k, v in enumerate(f.tolist()):
        count = count + 1 if v else 0
        run[k] = count
    return run >= m


def detection_delay(alarm: Sequence[bool] | np.ndarray, onset_step: int, sustain_m: int = 5) -> int | None:
    """Steps from onset to the first step of the first ``sustain_m``-long alarm run.

    Only runs that start at or after ``onset_step`` count.
    """
    a = np.asarray(alarm, dtype=bool)
    if not 0 <= onset_step <= len(a):
        raise ValueError(f"onset {onset_step} outside series of length {len(a)}")
    count = 0
    for k, v in enumerate(a[onset_step:].tolist()):
        count = count + 1 if v else 0
        if count >= sustain_m:
            return k - sustain_m + 1
    return None


def count_alarm_episodes(alarm: np.ndarray) -> int:
    """Number of rising edges in a boolean series."""
    a = np.asarray(alarm, dtype=bool)
    if not a.size:
        return 0
    return int(a[0]) + int(np.sum(a[1:] & ~a[:-1]))


def tracking_rmse(q_g: Sequence[float], q_ref: Sequence[float], window: tuple[int, int] | None = None) -> float:
    a = np.asarray(q_g, dtype=float)
    b = np.asarray(q_ref, dtype=float)
    if a.shape != b.shape:
        raise ValueError("series lengths differ")
    lo, hi = (0, len(a)) if window is None else window
    d = a[lo:hi] - b[lo:hi]
    if d.size == 0:
        raise ValueError("empty RMSE window")
    return math.sqrt(float(np.mean(d * d)))


class RocPoint(NamedTuple):
    threshold: float
    tpr: float
    fpr: float


def roc_curve(
    score: Sequence[float] | np.ndarray,
    truth: Sequence[bool] | np.ndarray,
    n_thresholds: int | None = None,
) -> tuple[list[RocPoint], float]:
    """ROC over every distinct score (alarm when score >= threshold).

    Higher scores mean more anomalous.  The curve runs from threshold +inf
    (0, 0) to -inf (1, 1); AUC is the trapezoid area of the full curve.  With
    ``n_thresholds`` only that many interior points (evenly spaced in rank)
    are returned, AUC still comes from the full curve.
    """
    s = np.asarray(score, dtype=float)
    t = np.asarray(truth, dtype=bool)
    if s.shape != t.shape or s.ndim != 1:
        raise ValueError("score and truth must be 1-d and equally long")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative label")

    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    t_sorted = t[order]
    tp = np.cumsum(t_sorted)
    fp = np.cumsum(~t_sorted)
    # last index of each run of equal scores
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1]
    tpr = np.r_[0.0, tp[last] / n_pos]
    fpr = np.r_[0.0, fp[last] / n_neg]
    thr = np.r_[np.inf, s_sorted[last]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))

    # append the -inf anchor; the lowest observed threshold already gives (1, 1)
    tpr = np.r_[tpr, 1.0]
    fpr = np.r_[fpr, 1.0]
    thr = np.r_[thr, -np.inf]
    idx = np.arange(thr.size)
    if n_thresholds is not None and thr.size > n_thresholds + 2:
        inner = np.unique(np.linspace(1, thr.size - 2, n_thresholds).round().astype(int))
        idx = np.r_[0, inner, thr.size - 1]
    points = [RocPoint(float(thr[i]), float(tpr[i]), float(fpr[i])) for i in idx]
    return points, auc


@dataclass
class MetricsReport:
    detector: str
    scenario_id: str
    counts: ConfusionCounts
    accuracy: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    fpr: float | None = None
    fnr: float | None = None
    detection_delay_steps: float | None = None
    rmse_pu: float | None = None
    auc: float | None = None
    false_alarm_episodes: int = 0
    extra: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_counts(cls, detector: str, scenario_id: str, counts: ConfusionCounts, **kw: Any) -> "MetricsReport":
        rep = cls(detector, scenario_id, counts, **kw)
        if counts.total:
            m = basic_metrics(counts)
            rep.accuracy, rep.precision, rep.recall, rep.fpr, rep.fnr = m
            rep.f1 = f1_score(m.precision, m.recall)
        return rep

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["counts"] = asdict(self.counts)
        return d

    CSV_COLUMNS = (
        "scenario_id", "detector", "tp", "tn", "fp", "fn", "accuracy", "precision", "recall", "f1",
        "fpr", "fnr", "detection_delay_steps", "rmse_pu", "auc", "false_alarm_episodes",
    )

    def csv_row(self) -> list[str]:
        def fmt(v: Any) -> str:
            if v is None:
                return ""
            if isinstance(v, float):
                return repr(v)
            return str(v)

        c = self.counts
        vals = [
            self.scenario_id, self.detector, c.tp, c.tn, c.fp, c.fn, self.accuracy, self.precision,
            self.recall, self.f1, self.fpr, self.fnr, self.detection_delay_steps, self.rmse_pu,
            self.auc, self.false_alarm_episodes,
        ]
        return [fmt(v) for v in vals]
