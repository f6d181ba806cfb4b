"""Counterfactual-query evaluation.

All errors compare conditional means on an equidistant action grid. The
ground truth is the task's noiseless response unless ``outcome_rng`` is
given, in which case each grid query is answered by a single noisy draw
from the task (useful to compare against numbers that include outcome noise).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .envs import DomainError, TrajectoryDataset, _atomic_write


class EvaluationError(ValueError):
    pass


@dataclass
class ActionGrid:
    points: np.ndarray
    source: tuple = ()

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 1 or len(self.points) < 2:
            raise ValueError("an action grid needs at least two points")

    @classmethod
    def equidistant(cls, low: float, high: float, n: int, margin: float = 0.0):
        return cls(np.linspace(low - margin, high + margin, n), (low, high, margin))

    @classmethod
    def for_task(cls, task, data: TrajectoryDataset | None = None, n: int | None = None):
        """9 points over the observed range widened by 1 (GNFC), or 33 points over [0, 1] (TCGA)."""
        if task.kind == "tcga":
            return cls.equidistant(0.0, 1.0, n or 33)
        if data is None:
            raise ValueError("the GNFC grid is derived from the observed actions")
        return cls.equidistant(float(data.a.min()), float(data.a.max()), n or 9, margin=1.0)

    @property
    def length(self) -> float:
        return float(abs(self.points[-1] - self.points[0]))

    def __len__(self):
        return len(self.points)


@dataclass
class CurveReport:
    grid: ActionGrid
    truth: np.ndarray
    predicted: np.ndarray
    n_states: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.truth) == len(self.predicted) == len(self.grid)):
            raise ValueError("curve lengths do not match the grid")

    def rows(self):
        return list(zip(self.grid.points.tolist(), np.asarray(self.truth).tolist(),
                        np.asarray(self.predicted).tolist()))

    def save(self, path, meta=None):
        def write(f):
            f.write("action,truth,predicted\n")
            for a, t, p in self.rows():
                f.write(f"{a:.9g},{t:.9g},{p:.9g}\n")
        _atomic_write(path, write)
        write_sidecar(path, {**self.meta, **(meta or {}), "n_states": self.n_states})


def write_sidecar(path, meta: dict):
    _atomic_write(os.fspath(path) + ".json",
                  lambda f: f.write(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n"))


def eval_states_from(data: TrajectoryDataset, rng, fraction: float = 0.2) -> np.ndarray:
    """A random ``fraction`` of the dataset's states."""
    n = max(1, int(round(fraction * len(data))))
    idx = np.sort(rng.choice(len(data), size=n, replace=False))
    return data.x[idx]


def _predict(model, x, a):
    return np.asarray(model.predict_response(x, a), dtype=float).reshape(-1)


def error_surface(model, task, eval_states, grid: ActionGrid, outcome_rng=None):
    """``(truth, predicted)`` arrays of shape ``(n_states, n_grid)``."""
    x = np.atleast_2d(np.asarray(eval_states, dtype=float))
    if len(x) == 0:
        raise EvaluationError("no evaluation states")
    n, k = len(x), len(grid)
    xs = np.repeat(x, k, axis=0)
    As = np.tile(grid.points, n)
    if outcome_rng is None:
        truth = task.mean_response(xs, As)
    else:
        truth = task.sample_response(xs, As, outcome_rng)
    pred = _predict(model, xs, As)
    return np.asarray(truth, dtype=float).reshape(n, k), pred.reshape(n, k)


def _trapezoid(values, points):
    # grid direction does not matter: integrate over |da|
    return np.abs(np.trapezoid(values, points, axis=-1))


def mise(model, task, eval_states, grid: ActionGrid, mc_samples: int = 1, outcome_rng=None) -> float:
    """Root of the state-averaged integral of the squared mean-prediction error over the grid."""
    reps = max(1, mc_samples) if outcome_rng is not None else 1
    vals = []
    for _ in range(reps):
        truth, pred = error_surface(model, task, eval_states, grid, outcome_rng)
        vals.append(np.sort(_trapezoid((truth - pred) ** 2, grid.points)))
    return float(math.sqrt(math.fsum(np.concatenate(vals)) / (len(vals[0]) * reps)))


def mmse(model, task, eval_states, grid: ActionGrid, outcome_rng=None) -> float:
    """Root of the state-averaged worst squared error over the grid."""
    truth, pred = error_surface(model, task, eval_states, grid, outcome_rng)
    per_state = np.max((truth - pred) ** 2, axis=1)
    return float(math.sqrt(math.fsum(np.sort(per_state)) / len(per_state)))


def response_curve(model, task, eval_states, grid: ActionGrid) -> CurveReport:
    truth, pred = error_surface(model, task, eval_states, grid)
    return CurveReport(grid, truth.mean(0), pred.mean(0), len(truth))


def delta_response_test(model, task, eval_transitions: TrajectoryDataset, deltas=None):
    """Rows ``(delta, mean predicted dy, mean true dy)`` for counterfactual shifts of the logged action."""
    if deltas is None:
        deltas = np.linspace(-1.0, 1.0, 9)
    x, a = eval_transitions.x, eval_transitions.a
    base_pred = _predict(model, x, a)
    base_true = np.asarray(task.mean_response(x, a), dtype=float)
    rows = []
    for d in np.asarray(deltas, dtype=float):
        a2 = a + d
        if task.kind == "tcga":
            a2 = np.clip(a2, task.action_low, task.action_high)
        dp = _predict(model, x, a2) - base_pred
        dt = np.asarray(task.mean_response(x, a2), dtype=float) - base_true
        rows.append((float(d), float(dp.mean()), float(dt.mean())))
    return rows


def curve_slope(curve: CurveReport) -> float:
    """End-to-end slope of the predicted curve."""
    p = curve.grid.points
    return float((curve.predicted[-1] - curve.predicted[0]) / (p[-1] - p[0]))


def monotonicity_violations(values) -> int:
    return int(np.sum(np.diff(np.asarray(values, dtype=float)) < 0))


# ---------------------------------------------------------------------------
# Uplift
# ---------------------------------------------------------------------------


def uplift_curve(scores, treated, outcomes):
    """Cumulative uplift after scanning the ``k`` highest-scored samples, ``k = 0..n``.

    ``curve[k] = (mean_treated_k - mean_control_k) * k / n`` over the scanned
    prefix (a group that is still empty contributes a zero difference).
    Ties are broken by the original sample order.
    """
    scores = np.asarray(scores, dtype=float)
    treated = np.asarray(treated, dtype=bool)
    y = np.asarray(outcomes, dtype=float)
    order = np.argsort(-scores, kind="stable")
    t, yy = treated[order], y[order]
    n = len(y)
    nt, nc = np.cumsum(t), np.cumsum(~t)
    st, sc = np.cumsum(np.where(t, yy, 0.0)), np.cumsum(np.where(t, 0.0, yy))
    with np.errstate(invalid="ignore", divide="ignore"):
        diff = np.where((nt > 0) & (nc > 0), st / np.maximum(nt, 1) - sc / np.maximum(nc, 1), 0.0)
    k = np.arange(1, n + 1)
    frac = np.concatenate([[0.0], k / n])
    return frac, np.concatenate([[0.0], diff * k / n])


def auuc_from_scores(scores, treated, outcomes):
    """Area between the uplift curve and the straight line to its end point."""
    frac, curve = uplift_curve(scores, treated, outcomes)
    baseline = frac * curve[-1]
    return float(np.trapezoid(curve - baseline, frac)), np.column_stack([frac, curve])


def auuc(model, rct_data: TrajectoryDataset, a_low=None, a_high=None, action_range=None):
    """``(auuc_value, curve)`` with the curve as ``(fraction, cumulative_uplift)`` rows.

    The predicted uplift is ``mean(x, a_high) - mean(x, a_low)``; samples whose
    action lies above the midpoint of the action range are the treated group.
    """
    if rct_data.policy_tag != "rct":
        raise EvaluationError("AUUC needs randomized (rct) data")
    lo, hi = action_range if action_range is not None else (float(rct_data.a.min()), float(rct_data.a.max()))
    if a_low is None:
        a_low = lo + 0.25 * (hi - lo)
    if a_high is None:
        a_high = lo + 0.75 * (hi - lo)
    if not a_low < a_high:
        raise DomainError("a_low must be below a_high")
    mid = 0.5 * (lo + hi)
    treated = rct_data.a > mid
    if treated.all() or not treated.any():
        raise EvaluationError("treatment or control group is empty")
    n = len(rct_data)
    scores = _predict(model, rct_data.x, np.full(n, a_high)) - _predict(model, rct_data.x, np.full(n, a_low))
    return auuc_from_scores(scores, treated, rct_data.y)


def permutation_noise_floor(treated, outcomes, rng, n_perm: int = 200, quantile: float = 0.95) -> float:
    """``quantile`` of |AUUC| under random scores: the ranking noise floor."""
    n = len(outcomes)
    vals = [abs(auuc_from_scores(rng.permutation(n).astype(float), treated, outcomes)[0])
            for _ in range(n_perm)]
    return float(np.quantile(vals, quantile))


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def save_table(path, header, rows, meta=None):
    def write(f):
        f.write(",".join(header) + "\n")
        for r in rows:
            f.write(",".join(_cell(v) for v in r) + "\n")
    _atomic_write(path, write)
    if meta is not None:
        write_sidecar(path, meta)


def _cell(v):
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)
