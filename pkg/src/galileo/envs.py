"""Synthetic ground-truth environments with biased behavior policies.

Two task families are provided:

* GNFC (general negative feedback control): a sequential task where the
  behavior policy pushes ``mean(x)`` toward a setpoint, so logged actions
  are strongly anti-correlated with the state.
* TCGA-style dosage response: one-step tasks whose dosage is drawn from a
  Beta distribution centred on the per-patient optimal dosage.

Both tasks expose the same small surface used by the trainers and metrics:
``mean_response``, ``sample_response``, ``next_state`` and ``response_of``.
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from typing import Iterator, NamedTuple, Optional, Union

import numpy as np


class DomainError(ValueError):
    """Raised when an argument lies outside the mathematical domain of an operation."""


class ConfigError(ValueError):
    """Raised for invalid task or training configuration."""


# ---------------------------------------------------------------------------
# Task specifications
# ---------------------------------------------------------------------------


@dataclass
class GnfcTaskSpec:
    """General negative feedback control task ``e{e}_p{p}``."""

    e: float = 1.0
    p: float = 1.0
    state_dim: int = 2
    horizon: int = 50
    setpoint: float = 62.5
    outcome_std: float = 2.0
    init_low: float = 45.0
    init_high: float = 80.0
    action_low: float = -2.5
    action_high: float = 2.5
    seed: int = 0

    kind = "gnfc"

    def __post_init__(self):
        if self.state_dim < 1:
            raise ConfigError("state_dim must be >= 1")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError("p must lie in [0, 1]")
        if self.e < 0:
            raise ConfigError("e must be non-negative")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")

    @property
    def name(self) -> str:
        return f"e{_fmt(self.e)}_p{_fmt(self.p)}"

    @property
    def response_dim(self) -> int:
        return 1

    def mean_response(self, x, a):
        """Noiseless dosage response ``mean(x) + a``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return x.mean(axis=1) + np.asarray(a, dtype=float)

    def sample_response(self, x, a, rng):
        mu = self.mean_response(x, a)
        if self.outcome_std == 0:
            return mu
        return mu + self.outcome_std * rng.standard_normal(mu.shape)

    def next_state(self, x, y):
        """Deterministic mapping ``x' = y - mean(x) + x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float).reshape(-1, 1)
        return x + (y - x.mean(axis=1, keepdims=True))

    def response_of(self, x, x_next):
        x_next = np.atleast_2d(np.asarray(x_next, dtype=float))
        return x_next.mean(axis=1)

    def sample_initial_states(self, n, rng):
        return rng.uniform(self.init_low, self.init_high, size=(n, self.state_dim))


@dataclass
class TcgaTaskSpec:
    """One-step dosage-response task ``t{k}_bias{alpha}`` (treatment_id = k + 1)."""

    treatment_id: int = 1
    bias_alpha: float = 2.0
    feature_dim: int = 100
    C: float = 10.0
    outcome_noise_std: float = 0.2
    seed: int = 0
    v1: Optional[np.ndarray] = field(default=None, repr=False)
    v2: Optional[np.ndarray] = field(default=None, repr=False)
    v3: Optional[np.ndarray] = field(default=None, repr=False)

    kind = "tcga"
    horizon = 1

    def __post_init__(self):
        if self.treatment_id not in (1, 2, 3):
            raise ConfigError(f"treatment_id must be 1, 2 or 3, got {self.treatment_id}")
        if self.bias_alpha < 1:
            raise ConfigError("bias_alpha must be >= 1")
        if self.v1 is None or self.v2 is None or self.v3 is None:
            vrng = np.random.default_rng(self.seed)
            vs = []
            for _ in range(3):
                v = vrng.standard_normal(self.feature_dim)
                vs.append(v / np.linalg.norm(v))
            self.v1, self.v2, self.v3 = vs
        self.v1, self.v2, self.v3 = (np.asarray(v, dtype=float) for v in (self.v1, self.v2, self.v3))

    @property
    def name(self) -> str:
        return f"t{self.treatment_id - 1}_bias{_fmt(self.bias_alpha)}"

    @property
    def state_dim(self) -> int:
        return self.feature_dim

    @property
    def response_dim(self) -> int:
        return 1

    action_low = 0.0
    action_high = 1.0

    def _projections(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.feature_dim:
            raise DomainError(f"feature dimension {x.shape[1]} != {self.feature_dim}")
        return x @ self.v1, x @ self.v2, x @ self.v3

    def mean_response(self, x, a):
        return tcga_response(self, x, a)

    def sample_response(self, x, a, rng):
        mu = self.mean_response(x, a)
        if self.outcome_noise_std == 0:
            return mu
        return mu + self.outcome_noise_std * rng.standard_normal(mu.shape)

    def next_state(self, x, y):
        return np.asarray(y, dtype=float).reshape(-1, 1)

    def response_of(self, x, x_next):
        return np.atleast_2d(np.asarray(x_next, dtype=float))[:, 0]

    def sample_features(self, n, rng):
        z = np.abs(rng.standard_normal((n, self.feature_dim)))
        return z / np.linalg.norm(z, axis=1, keepdims=True)

    sample_initial_states = sample_features

    def optimal_dosage(self, x):
        """Per-row dosage maximizing the noiseless response on ``[0, 1]``.

        Uses the closed-form optimum where it is a valid interior maximum and
        falls back to a 1001-point grid search otherwise.
        """
        p1, p2, p3 = self._projections(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.treatment_id == 1:
                cand = p2 / (2 * p3)
                closed_ok = (p3 > 0) & (cand >= 0) & (cand <= 1)
            elif self.treatment_id == 2:
                cand = p3 / (2 * p2)
                closed_ok = (p2 / p3 > 0) & (cand >= 0) & (cand <= 1)
            else:
                b = 0.75 * p2 / p3
                cand = np.where((b >= 0.75) & (b <= 3.0), b / 3.0, 1.0)
                closed_ok = np.isfinite(b)
        out = np.where(closed_ok, cand, np.nan)
        bad = ~closed_ok
        if bad.any():
            grid = np.linspace(0.0, 1.0, 1001)
            xb = np.atleast_2d(np.asarray(x, dtype=float))[bad]
            vals = np.stack([tcga_response(self, xb, np.full(len(xb), g)) for g in grid], axis=1)
            out[bad] = grid[np.argmax(vals, axis=1)]
        return out

    def to_dict(self):
        d = asdict(self)
        for k in ("v1", "v2", "v3"):
            d[k] = [float(v) for v in d[k]]
        return d


TaskSpec = Union[GnfcTaskSpec, TcgaTaskSpec]


def _fmt(v: float) -> str:
    return f"{v:g}"


def task_to_dict(task) -> dict:
    d = task.to_dict() if hasattr(task, "to_dict") else asdict(task)
    d["kind"] = task.kind
    d["name"] = task.name
    return d


def task_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    d.pop("name", None)
    if kind == "gnfc":
        return GnfcTaskSpec(**d)
    if kind == "tcga":
        for k in ("v1", "v2", "v3"):
            if d.get(k) is not None:
                d[k] = np.asarray(d[k], dtype=float)
        return TcgaTaskSpec(**d)
    raise ConfigError(f"unknown task kind {kind!r}")


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


class Transition(NamedTuple):
    x: np.ndarray
    a: float
    x_next: np.ndarray
    y: float
    episode_id: int
    t: int


@dataclass
class TrajectoryDataset:
    """Columnar collection of transitions, ordered by ``(episode_id, t)``."""

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    x_next: np.ndarray
    episode_id: np.ndarray
    t: np.ndarray
    task_tag: str = ""
    policy_tag: str = "behavior"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.x_next = np.atleast_2d(np.asarray(self.x_next, dtype=float))
        self.a = np.asarray(self.a, dtype=float).reshape(-1)
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        self.episode_id = np.asarray(self.episode_id, dtype=np.int64).reshape(-1)
        self.t = np.asarray(self.t, dtype=np.int64).reshape(-1)
        n = len(self.a)
        for name in ("x", "y", "x_next", "episode_id", "t"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self):
        return len(self.a)

    @property
    def state_dim(self):
        return self.x.shape[1]

    def transitions(self) -> Iterator[Transition]:
        for i in range(len(self)):
            yield Transition(self.x[i], float(self.a[i]), self.x_next[i], float(self.y[i]),
                             int(self.episode_id[i]), int(self.t[i]))

    def initial_states(self):
        return self.x[self.t == 0]

    def subset(self, idx) -> "TrajectoryDataset":
        return TrajectoryDataset(self.x[idx], self.a[idx], self.y[idx], self.x_next[idx],
                                 self.episode_id[idx], self.t[idx], self.task_tag,
                                 self.policy_tag, dict(self.meta))

    def sorted(self) -> "TrajectoryDataset":
        order = np.lexsort((self.t, self.episode_id))
        return self.subset(order)

    def check_episodes(self, atol=1e-9):
        """Raise ``ValueError`` unless every episode has consecutive steps from 0."""
        if len(self) == 0:
            return
        ep, t = self.episode_id, self.t
        starts = np.r_[True, ep[1:] != ep[:-1]]
        if np.any(t[starts] != 0):
            raise ValueError("episode does not start at t=0")
        cont = ~starts
        if np.any(t[1:][cont[1:]] != t[:-1][cont[1:]] + 1):
            raise ValueError("timesteps are not consecutive within an episode")
        if len(np.unique(ep[starts])) != starts.sum():
            raise ValueError("episode ids are not contiguous")
        if self.x_next.shape == self.x.shape:
            link = cont[1:]
            if not np.allclose(self.x_next[:-1][link], self.x[1:][link], atol=atol, rtol=0):
                raise ValueError("x_next of step t differs from x of step t+1")

    @staticmethod
    def concat(parts) -> "TrajectoryDataset":
        parts = list(parts)
        first = parts[0]
        return TrajectoryDataset(
            np.concatenate([p.x for p in parts]), np.concatenate([p.a for p in parts]),
            np.concatenate([p.y for p in parts]), np.concatenate([p.x_next for p in parts]),
            np.concatenate([p.episode_id for p in parts]), np.concatenate([p.t for p in parts]),
            first.task_tag, first.policy_tag, dict(first.meta))

    # -- serialization -----------------------------------------------------

    def header(self):
        d, dn = self.x.shape[1], self.x_next.shape[1]
        return (["episode_id", "t"] + [f"x_{i}" for i in range(d)] + ["a", "y"]
                + [f"xn_{i}" for i in range(dn)])

    def save(self, path, metadata: Optional[dict] = None):
        """Write ``path`` (comma-separated) plus a ``path + '.json'`` metadata sidecar."""
        path = os.fspath(path)
        rows = np.column_stack([self.episode_id, self.t, self.x, self.a, self.y, self.x_next])

        def write_csv(f):
            w = csv.writer(f, lineterminator="\n")
            w.writerow(self.header())
            for r in rows:
                w.writerow([str(int(r[0])), str(int(r[1]))] + ["%.9g" % v for v in r[2:]])

        _atomic_write(path, write_csv)
        meta = {"task_tag": self.task_tag, "policy_tag": self.policy_tag,
                "n": len(self), "state_dim": self.x.shape[1], "next_dim": self.x_next.shape[1]}
        meta.update(self.meta)
        if metadata:
            meta.update(metadata)
        _atomic_write(path + ".json", lambda f: json.dump(meta, f, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "TrajectoryDataset":
        path = os.fspath(path)
        with open(path + ".json") as f:
            meta = json.load(f)
        with open(path) as f:
            header = next(csv.reader(f))
        d, dn = meta["state_dim"], meta["next_dim"]
        if len(header) != 4 + d + dn:
            raise ValueError(f"{path}: header has {len(header)} columns, expected {4 + d + dn}")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        ep, t = data[:, 0].astype(np.int64), data[:, 1].astype(np.int64)
        x = data[:, 2:2 + d]
        a, y = data[:, 2 + d], data[:, 3 + d]
        xn = data[:, 4 + d:]
        extra = {k: v for k, v in meta.items()
                 if k not in ("task_tag", "policy_tag", "n", "state_dim", "next_dim")}
        return cls(x, a, y, xn, ep, t, meta["task_tag"], meta["policy_tag"], extra)


def _atomic_write(path, writer):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            writer(f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# GNFC
# ---------------------------------------------------------------------------


def gnfc_behavior_action(x, spec: GnfcTaskSpec, rng):
    """Biased controller ``(setpoint - mean(x)) / 15 + eps``.

    ``eps`` is zero with probability ``1 - p`` and ``Uniform(-e, e)`` otherwise.
    Accepts a single state or a batch; returns a float or an array accordingly.
    """
    x_arr = np.asarray(x, dtype=float)
    single = x_arr.ndim == 1
    x2 = np.atleast_2d(x_arr)
    base = (spec.setpoint - x2.mean(axis=1)) / 15.0
    n = len(base)
    hit = rng.random(n) < spec.p
    noise = rng.uniform(-spec.e, spec.e, size=n)
    a = base + np.where(hit, noise, 0.0)
    return float(a[0]) if single else a


def gnfc_step(x, a, spec: GnfcTaskSpec, rng):
    """One GNFC transition: ``y ~ N(mean(x) + a, outcome_std)``, ``x' = y - mean(x) + x``."""
    x_arr = np.asarray(x, dtype=float)
    single = x_arr.ndim == 1
    x2 = np.atleast_2d(x_arr)
    y = spec.sample_response(x2, np.asarray(a, dtype=float).reshape(-1), rng)
    xn = spec.next_state(x2, y)
    if single:
        return float(y[0]), xn[0]
    return y, xn


class GnfcBehaviorPolicy:
    """Callable wrapper used by rollouts: ``sample_action(x, rng)``."""

    def __init__(self, spec: GnfcTaskSpec):
        self.spec = spec

    def sample_action(self, x, rng):
        return gnfc_behavior_action(np.atleast_2d(x), self.spec, rng)


class UniformPolicy:
    def __init__(self, low, high):
        self.low, self.high = float(low), float(high)

    def sample_action(self, x, rng):
        return rng.uniform(self.low, self.high, size=len(np.atleast_2d(x)))


class GroundTruthModel:
    """The true response ``M*`` of a task, usable wherever a learned model is."""

    def __init__(self, task):
        self.task = task

    def predict_response(self, x, a):
        return self.task.mean_response(x, a)

    def sample_response(self, x, a, rng):
        return self.task.sample_response(x, a, rng)


def _rollout(task, policy, n_episodes, rng, tag, policy_tag, init_states=None):
    H = task.horizon
    x = task.sample_initial_states(n_episodes, rng) if init_states is None else np.asarray(init_states, float)
    xs, As, ys, xns = [], [], [], []
    for _ in range(H):
        a = np.asarray(policy.sample_action(x, rng), dtype=float).reshape(-1)
        y = task.sample_response(x, a, rng)
        xn = task.next_state(x, y)
        xs.append(x); As.append(a); ys.append(y); xns.append(xn)
        x = xn
    # stack as (H, n, ...) then reorder episode-major
    X = np.stack(xs, axis=1).reshape(n_episodes * H, -1)
    XN = np.stack(xns, axis=1).reshape(n_episodes * H, -1)
    A = np.stack(As, axis=1).reshape(-1)
    Y = np.stack(ys, axis=1).reshape(-1)
    ep = np.repeat(np.arange(n_episodes), H)
    t = np.tile(np.arange(H), n_episodes)
    return TrajectoryDataset(X, A, Y, XN, ep, t, tag, policy_tag)


# ---------------------------------------------------------------------------
# TCGA
# ---------------------------------------------------------------------------


def tcga_response(spec: TcgaTaskSpec, x, a):
    """Noiseless dosage response of the configured treatment."""
    a = np.asarray(a, dtype=float)
    if np.any((a < 0) | (a > 1)) or not np.all(np.isfinite(a)):
        raise DomainError("dosage must lie in [0, 1]")
    p1, p2, p3 = spec._projections(x)
    C = spec.C
    if spec.treatment_id == 1:
        return C * (p1 + 12.0 * p2 * a - 12.0 * p3 * a ** 2)
    if spec.treatment_id == 2:
        return C * (p1 + np.sin(math.pi * (p2 / p3) * a))
    if spec.treatment_id == 3:
        b = 0.75 * p2 / p3
        return C * (p1 + 12.0 * a * (a - b) ** 2)
    raise ConfigError(f"treatment_id must be 1, 2 or 3, got {spec.treatment_id}")


def beta_parameters(a_star, bias_alpha):
    """Beta(alpha, beta) parameters whose mode is ``a_star`` (clamped to [0.01, 1])."""
    if bias_alpha < 1:
        raise DomainError("bias_alpha must be >= 1")
    a_star = np.clip(np.asarray(a_star, dtype=float), 0.01, 1.0)
    beta = (bias_alpha - 1.0) / a_star + 2.0 - bias_alpha
    return bias_alpha, beta


def tcga_assign_treatment(a_star, bias_alpha, rng):
    """Draw dosages ``a ~ Beta(alpha, (alpha - 1)/a* + 2 - alpha)``."""
    alpha, beta = beta_parameters(a_star, bias_alpha)
    return rng.beta(alpha, beta)


class TcgaBehaviorPolicy:
    def __init__(self, spec: TcgaTaskSpec):
        self.spec = spec

    def sample_action(self, x, rng):
        return np.atleast_1d(tcga_assign_treatment(self.spec.optimal_dosage(x), self.spec.bias_alpha, rng))


# ---------------------------------------------------------------------------
# Collection
# ---------------------------------------------------------------------------


def collect_offline_dataset(task, n: int, rng) -> TrajectoryDataset:
    """Log ``n`` episodes (GNFC) or ``n`` one-step samples (TCGA) under the biased behavior policy."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if task.kind == "gnfc":
        data = _rollout(task, GnfcBehaviorPolicy(task), n, rng, task.name, "behavior")
    else:
        data = _rollout(task, TcgaBehaviorPolicy(task), n, rng, task.name, "behavior")
    data.meta["task"] = task_to_dict(task)
    return data


def make_rct_dataset(task, n: int, rng) -> TrajectoryDataset:
    """Same as :func:`collect_offline_dataset` with state-independent uniform actions."""
    if n < 1:
        raise ValueError("n must be >= 1")
    policy = UniformPolicy(task.action_low, task.action_high)
    data = _rollout(task, policy, n, rng, task.name, "rct")
    data.meta["task"] = task_to_dict(task)
    return data
