"""Command-line entry point.

Exit codes: 0 on success, 2 for configuration errors, 3 when training diverges.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .bc import fit_behavior_policy, load_checkpoint
from .envs import ConfigError, DomainError, TrajectoryDataset, collect_offline_dataset, make_rct_dataset
from .experiment import (ExperimentManifest, evaluate, export_report, fit_method, manifest_from_config,
                         parse_task, run_experiment, seed_offset, _write_json)
from .trainer import TrainingDivergence

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def _seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from err


def _common(p, task=True):
    if task:
        p.add_argument("--task", help="task name, e.g. e0.05_p0.2 or t0_bias50")
    p.add_argument("--seeds", type=_seeds, default=None, help="comma-separated seeds (default 1,2,3)")
    p.add_argument("--config", help="JSON file with manifest fields and overrides")
    p.add_argument("--out", default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="galileo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="collect offline (and optionally randomized) datasets")
    _common(p)
    p.add_argument("--n", type=int, default=None, help="episodes (GNFC) or samples (TCGA)")
    p.add_argument("--rct", action="store_true", help="use uniformly random actions instead")

    p = sub.add_parser("fit-bc", help="behavior-clone the logging policy from a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--std-floor", type=float, default=0.005)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")

    for name, helptext in (("train", "collect data and train one method"),
                           ("run", "train and evaluate every seed, then export")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--method", choices=["galileo", "galileo0", "sl", "ipw"], default=None)
        p.add_argument("--ablation", action="append", default=None,
                       help="ablation flag; may be repeated")
        p.add_argument("--rct", action="store_true", default=None, help="also report AUUC on RCT data")

    p = sub.add_parser("eval", help="evaluate a saved model on a saved dataset")
    p.add_argument("--task", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--rct-data", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="metrics JSON path")

    p = sub.add_parser("export", help="consolidate finished runs into report tables")
    p.add_argument("--out", required=True)
    return parser


def _manifest(args) -> ExperimentManifest:
    return manifest_from_config(
        args.config, task=args.task, method=getattr(args, "method", None), seeds=args.seeds,
        out=args.out, ablations=getattr(args, "ablation", None), rct=getattr(args, "rct", None))


def cmd_gen_data(args):
    m = _manifest(args)
    parse_task(m.task)
    out = m.out
    os.makedirs(out, exist_ok=True)
    for seed in m.seeds:
        eff = seed + seed_offset()
        task = parse_task(m.task, seed=eff)
        rng = np.random.default_rng(eff)
        n = args.n or (100 if task.kind == "gnfc" else 5000)
        data = make_rct_dataset(task, n, rng) if args.rct else collect_offline_dataset(task, n, rng)
        kind = "rct" if args.rct else "offline"
        path = os.path.join(out, f"{m.task}_{kind}_seed{seed}.csv")
        data.save(path, {"seed": seed, "effective_seed": eff})
        print(path)


def cmd_fit_bc(args):
    data = TrajectoryDataset.load(args.data)
    policy = fit_behavior_policy(data, args.std_floor, args.steps, np.random.default_rng(args.seed))
    policy.save(args.out, {"data": os.path.abspath(args.data), "std_floor": args.std_floor})
    print(args.out)


def cmd_train(args):
    m = _manifest(args).validate()
    for seed in m.seeds:
        eff = seed + seed_offset()
        task = parse_task(m.task, seed=eff)
        rng = np.random.default_rng(eff)
        run_dir = m.run_dir(seed)
        os.makedirs(run_dir, exist_ok=True)
        data = collect_offline_dataset(task, m.n_data or (100 if task.kind == "gnfc" else 5000), rng)
        model, _, resolved = fit_method(m, task, data, rng, run_dir)
        model.save(os.path.join(run_dir, "model.pt"), {"task": m.task, "method": m.method, "seed": seed})
        data.save(os.path.join(run_dir, "data.csv"), {"seed": seed})
        _write_json(os.path.join(run_dir, "config.json"), resolved)
        print(run_dir)


def cmd_eval(args):
    data = TrajectoryDataset.load(args.data)
    task = parse_task(args.task)
    if "task" in data.meta:
        from .envs import task_from_dict
        task = task_from_dict(data.meta["task"])
    rct = TrajectoryDataset.load(args.rct_data) if args.rct_data else None
    model = load_checkpoint(args.model)
    ev = evaluate(model, task, data, np.random.default_rng(args.seed), rct)
    _write_json(args.out, ev["metrics"])
    ev["curve"].save(os.path.splitext(args.out)[0] + "_curve.csv", {"task": args.task})
    print(json.dumps({k: ev["metrics"][k] for k in ("sqrt_mise", "sqrt_mmse")}))


def cmd_run(args):
    m = _manifest(args)
    for r in run_experiment(m):
        print(f"{r['task']} {r['method']} {r['ablation']} seed={r['seed']} "
              f"sqrt_mise={r['sqrt_mise']:.3f} sqrt_mmse={r['sqrt_mmse']:.3f}")


def cmd_export(args):
    rows = export_report(args.out)
    print(f"{len(rows)} runs exported to {os.path.join(args.out, 'report.csv')}")


COMMANDS = {"gen-data": cmd_gen_data, "fit-bc": cmd_fit_bc, "train": cmd_train, "eval": cmd_eval,
            "run": cmd_run, "export": cmd_export}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except TrainingDivergence as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, DomainError, TypeError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
