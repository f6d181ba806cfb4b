"""End-to-end experiment plumbing: task names, manifests, per-seed runs and report export."""

from __future__ import annotations

import glob
import json
import logging
import math
import os
import re
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .baselines import BaselineConfig, train_ipw, train_sl
from .bc import fit_behavior_policy, save_checkpoint
from .envs import (ConfigError, GnfcTaskSpec, TcgaTaskSpec, _atomic_write, collect_offline_dataset,
                   make_rct_dataset, task_to_dict)
from .metrics import (ActionGrid, auuc, delta_response_test, eval_states_from, mise, mmse,
                      monotonicity_violations, response_curve, curve_slope, save_table)
from .trainer import ABLATIONS, NO_NOISE_FLOOR, TrainConfig, galileo_train

log = logging.getLogger(__name__)

METHODS = ("galileo", "galileo0", "sl", "ipw")
SEED_OFFSET_ENV = "GALILEO_SEED_OFFSET"
# fixed stream for the sampled-outcome metric so every method sees the same draws
OUTCOME_STREAM = 20_231_017

_GNFC_RE = re.compile(r"^e(\d+(?:\.\d+)?)_p(\d+(?:\.\d+)?)$")
_TCGA_RE = re.compile(r"^t(\d+)_bias(\d+(?:\.\d+)?)$")


def parse_task(name: str, seed: int = 0):
    """``e{e}_p{p}`` -> GNFC, ``t{k}_bias{alpha}`` -> TCGA treatment ``k + 1``."""
    m = _GNFC_RE.match(name)
    if m:
        task = GnfcTaskSpec(e=float(m.group(1)), p=float(m.group(2)), seed=seed)
    else:
        m = _TCGA_RE.match(name)
        if not m:
            raise ConfigError(f"unrecognized task name {name!r}")
        task = TcgaTaskSpec(treatment_id=int(m.group(1)) + 1, bias_alpha=float(m.group(2)), seed=seed)
    if task.name != name:
        raise ConfigError(f"task name {name!r} is not canonical (expected {task.name!r})")
    return task


def seed_offset() -> int:
    raw = os.environ.get(SEED_OFFSET_ENV, "0")
    try:
        return int(raw)
    except ValueError as err:
        raise ConfigError(f"{SEED_OFFSET_ENV} must be an integer, got {raw!r}") from err


@dataclass
class ExperimentManifest:
    task: str
    method: str = "galileo"
    seeds: list = field(default_factory=lambda: [1, 2, 3])
    out: str = "runs"
    ablations: list = field(default_factory=list)
    overrides: dict = field(default_factory=dict)
    n_data: int | None = None
    rct: bool = False
    n_rct: int = 5000

    def validate(self):
        parse_task(self.task)
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        for a in self.ablations:
            if a not in ABLATIONS:
                raise ConfigError(f"unknown ablation {a!r}")
        if self.ablations and self.method not in ("galileo", "galileo0"):
            raise ConfigError("ablations apply to galileo runs only")
        unknown = set(self.overrides) - {"train", "baseline"}
        if unknown:
            raise ConfigError(f"unknown override sections {sorted(unknown)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        self.train_config(parse_task(self.task))
        self.baseline_config()
        return self

    @property
    def tag(self) -> str:
        return "+".join(sorted(self.ablations)) if self.ablations else "none"

    def train_config(self, task) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        over = dict(self.overrides.get("train", {}))
        bad = set(over) - names
        if bad:
            raise ConfigError(f"unknown train settings {sorted(bad)}")
        cfg = TrainConfig.for_task(task, **over)
        if self.method == "galileo0":
            cfg.one_step = True
        return cfg.with_ablation(*self.ablations).resolved()

    def baseline_config(self) -> BaselineConfig:
        names = {f.name for f in fields(BaselineConfig)}
        over = dict(self.overrides.get("baseline", {}))
        bad = set(over) - names
        if bad:
            raise ConfigError(f"unknown baseline settings {sorted(bad)}")
        return BaselineConfig(**over)

    def run_dir(self, seed: int) -> str:
        return os.path.join(self.out, self.task, self.method, self.tag, f"seed{seed}")


def default_data_size(task) -> int:
    return 100 if task.kind == "gnfc" else 5000


def fit_method(manifest: ExperimentManifest, task, data, rng, run_dir=None):
    """Train the manifest's method; returns ``(model, training_log, resolved_config)``."""
    if manifest.method in ("sl", "ipw"):
        bcfg = manifest.baseline_config()
        if manifest.method == "sl":
            return train_sl(data, bcfg, rng), [], {"baseline": bcfg.to_dict()}
        tcfg = TrainConfig.for_task(task)
        behavior = fit_behavior_policy(data, max(tcfg.eps_mu, NO_NOISE_FLOOR), tcfg.bc_steps, rng,
                                       bcfg.hidden, lr=tcfg.bc_learning_rate, activation=bcfg.activation)
        model = train_ipw(data, behavior, bcfg.w_max, bcfg, rng)
        return model, [], {"baseline": bcfg.to_dict(), "behavior_std_floor": tcfg.eps_mu,
                           "behavior_steps": tcfg.bc_steps}
    cfg = manifest.train_config(task)
    log_path = os.path.join(run_dir, "train_log.jsonl") if run_dir else None
    model, records = galileo_train(task, data, cfg, rng, log_path=log_path, checkpoint_dir=run_dir)
    return model, records, {"train": cfg.to_dict()}


def evaluate(model, task, data, rng, rct=None, n_outcome_draws: int = 1):
    """All metrics for one trained model; deterministic given the generator state."""
    grid = ActionGrid.for_task(task, data)
    states = eval_states_from(data, rng)
    idx = np.sort(rng.choice(len(data), size=len(states), replace=False))
    curve = response_curve(model, task, states, grid)
    res = {
        "sqrt_mise": mise(model, task, states, grid),
        "sqrt_mmse": mmse(model, task, states, grid),
        "sqrt_mise_sampled": mise(model, task, states, grid, mc_samples=n_outcome_draws,
                                  outcome_rng=np.random.default_rng(OUTCOME_STREAM)),
        "sqrt_mmse_sampled": mmse(model, task, states, grid,
                                  outcome_rng=np.random.default_rng(OUTCOME_STREAM)),
        "curve_slope": curve_slope(curve),
        "monotonicity_violations": monotonicity_violations(curve.predicted),
        "grid": grid.points.tolist(),
        "n_eval_states": len(states),
    }
    deltas = delta_response_test(model, task, data.subset(idx))
    out = {"metrics": res, "curve": curve, "delta": deltas}
    if rct is not None:
        value, ucurve = auuc(model, rct, action_range=(task.action_low, task.action_high))
        res["auuc"] = value
        out["uplift"] = ucurve
    return out


def _write_json(path, obj):
    _atomic_write(path, lambda f: f.write(json.dumps(obj, indent=2, sort_keys=True) + "\n"))


def run_seed(manifest: ExperimentManifest, seed: int) -> dict:
    eff_seed = seed + seed_offset()
    rng = np.random.default_rng(eff_seed)
    task = parse_task(manifest.task, seed=eff_seed)
    run_dir = manifest.run_dir(seed)
    os.makedirs(run_dir, exist_ok=True)
    data = collect_offline_dataset(task, manifest.n_data or default_data_size(task), rng)
    rct = None
    if manifest.rct:
        n = manifest.n_rct if task.kind == "tcga" else max(1, manifest.n_rct // task.horizon)
        rct = make_rct_dataset(task, n, np.random.default_rng([eff_seed, 1]))
    t0 = time.perf_counter()
    model, records, resolved = fit_method(manifest, task, data, rng, run_dir)
    runtime = time.perf_counter() - t0
    ev = evaluate(model, task, data, np.random.default_rng([eff_seed, 2]), rct)
    fallback_rate = (float(np.mean([bool(r.get("fallback")) for r in records]))
                     if records and "fallback" in records[0] else 0.0)
    metrics = {"task": manifest.task, "method": manifest.method, "ablation": manifest.tag,
               "seed": seed, "effective_seed": eff_seed, "fallback_rate": fallback_rate,
               **ev["metrics"], "config": resolved, "task_spec": task_to_dict(task),
               "auuc_convention": "area between the cumulative uplift curve and the straight line "
                                  "to its end point; treated = action above the range midpoint; "
                                  "uplift = mean(x, 75th pct) - mean(x, 25th pct)"}
    _write_json(os.path.join(run_dir, "metrics.json"), metrics)
    _write_json(os.path.join(run_dir, "run_info.json"), {"runtime_s": runtime})
    ev["curve"].save(os.path.join(run_dir, "curve.csv"), {"task": manifest.task, "seed": seed})
    save_table(os.path.join(run_dir, "delta.csv"), ["delta", "predicted_dy", "true_dy"], ev["delta"])
    if "uplift" in ev:
        save_table(os.path.join(run_dir, "uplift.csv"), ["fraction", "cumulative_uplift"],
                   [tuple(r) for r in ev["uplift"].tolist()])
    save_checkpoint(model, os.path.join(run_dir, "model.pt"), "gaussian_conditional",
                    {"task": manifest.task, "method": manifest.method, "seed": seed})
    metrics["runtime_s"] = runtime
    return metrics


def run_experiment(manifest: ExperimentManifest) -> list:
    """Run every seed of ``manifest`` and refresh the consolidated report."""
    manifest.validate()
    os.makedirs(manifest.out, exist_ok=True)
    results = []
    for seed in manifest.seeds:
        log.info("running %s/%s seed %s", manifest.task, manifest.method, seed)
        results.append(run_seed(manifest, seed))
    export_report(manifest.out)
    return results


REPORT_HEADER = ["task", "method", "ablation", "seed", "sqrt_mise", "sqrt_mmse", "sqrt_mise_sampled",
                 "fallback_rate", "runtime_s"]
AGG_HEADER = ["task", "method", "ablation", "n_seeds", "sqrt_mise_mean", "sqrt_mise_std",
              "sqrt_mmse_mean", "sqrt_mmse_std", "sqrt_mise_sampled_mean", "sqrt_mise_sampled_std"]


def mean_std(values):
    """Mean and sample standard deviation (``n - 1``); std is NaN for a single value."""
    values = [float(v) for v in values]
    if not values:
        return math.nan, math.nan
    arr = np.asarray(values)
    return float(arr.mean()), (float(arr.std(ddof=1)) if len(arr) > 1 else math.nan)


def export_report(output_dir) -> list:
    """Consolidate per-seed runs under ``output_dir`` into ``report.csv`` and ``aggregate.csv``."""
    paths = sorted(glob.glob(os.path.join(output_dir, "**", "metrics.json"), recursive=True))
    rows = []
    for p in paths:
        try:
            with open(p) as f:
                m = json.load(f)
            info_path = os.path.join(os.path.dirname(p), "run_info.json")
            runtime = math.nan
            if os.path.exists(info_path):
                with open(info_path) as f:
                    runtime = json.load(f).get("runtime_s", math.nan)
            rows.append([m["task"], m["method"], m["ablation"], int(m["seed"]), float(m["sqrt_mise"]),
                         float(m["sqrt_mmse"]), float(m.get("sqrt_mise_sampled", math.nan)),
                         float(m.get("fallback_rate", 0.0)), float(runtime)])
        except (OSError, KeyError, ValueError) as err:
            log.warning("skipping incomplete run %s: %s", p, err)
    if not rows:
        log.warning("no completed runs under %s", output_dir)
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
    os.makedirs(output_dir, exist_ok=True)
    save_table(os.path.join(output_dir, "report.csv"), REPORT_HEADER, rows)
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[:3]), []).append(r)
    agg = []
    for key in sorted(groups):
        g = groups[key]
        cols = []
        for i in (4, 5, 6):
            cols.extend(mean_std([r[i] for r in g]))
        agg.append(list(key) + [len(g)] + cols)
    save_table(os.path.join(output_dir, "aggregate.csv"), AGG_HEADER, agg)
    return rows


def manifest_from_config(path, **cli) -> ExperimentManifest:
    """Merge a JSON config file with command-line values (command line wins)."""
    base = {}
    if path:
        try:
            with open(path) as f:
                base = json.load(f)
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        if not isinstance(base, dict):
            raise ConfigError("config file must hold a JSON object")
    known = {f.name for f in fields(ExperimentManifest)}
    bad = set(base) - known
    if bad:
        raise ConfigError(f"unknown config keys {sorted(bad)}")
    base.update({k: v for k, v in cli.items() if v is not None})
    if "task" not in base:
        raise ConfigError("a task name is required")
    return ExperimentManifest(**base)


def manifest_dict(manifest: ExperimentManifest) -> dict:
    return asdict(manifest)
