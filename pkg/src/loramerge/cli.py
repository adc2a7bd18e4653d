"""Command-line entry point for reproducible merge experiments.

Commands: train-toy, diagnose, merge, sweep, eval. Each run resolves its
configuration (JSON file + flag overrides, flags win), creates a fresh
directory named by timestamp and seed, and writes a manifest with the resolved
config and sha256 of every artifact so the run can be reproduced bit-exactly.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import diagnostics, harness, mergers, tara
from .adapters import AdapterCollection, load_collection, save_collection
from .rng import substream

TARA_METHODS = ("tara-a", "tara-b", "adamerging")
ALL_METHODS = mergers.METHODS + TARA_METHODS


class UsageError(ValueError):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _run_dir(out: str, seed: int) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(out) / f"{stamp}-seed{seed}"
    run = base
    n = 1
    while run.exists():
        run = Path(f"{base}-{n}")
        n += 1
    run.mkdir(parents=True)
    return run


def _write_manifest(run: Path, command: str, config: dict):
    artifacts = {
        p.name: _sha256(p) for p in sorted(run.iterdir()) if p.name != "manifest.json"
    }
    manifest = {"command": command, "config": config, "artifacts": artifacts}
    (run / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _resolve(args, keys: list[str]) -> dict:
    """JSON config overlaid with explicitly-passed flags (flags win)."""
    config = {}
    if getattr(args, "config", None):
        try:
            config = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(config, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(config) - set(keys)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for key in keys:
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            config[key] = val
    return config


def _parse_preference(text: str, n: int) -> np.ndarray:
    try:
        rho = np.array([float(v) for v in text.split(",")])
    except ValueError as exc:
        raise UsageError(f"bad preference {text!r}") from exc
    if rho.size != n:
        raise UsageError(f"preference has {rho.size} entries, suite has {n} tasks")
    if np.any(rho < 0) or abs(rho.sum() - 1.0) > 1e-9:
        raise UsageError("preference must be nonnegative and sum to 1")
    return rho


def _load_suite(args):
    suite, coll = harness.load_suite(args.container, args.sidecar)
    return suite, coll


def _write_report(run: Path, name: str, report: harness.EvalReport):
    (run / name).write_text(json.dumps(report.to_json(), indent=1))


def _write_trace(run: Path, name: str, trace: tara.OptimTrace):
    with open(run / name, "w", newline="") as fh:
        writer = csv.writer(fh)
        n = len(trace.per_task[0]) if trace.per_task else 0
        writer.writerow(["step", "objective"] + [f"f{i}" for i in range(n)])
        for step, val, f in zip(trace.steps, trace.objective, trace.per_task):
            writer.writerow([step, repr(val)] + [repr(float(x)) for x in f])


def cmd_train_toy(args) -> int:
    keys = [
        "n_tasks", "d", "m", "n_classes", "n_train", "n_eval", "n_adapt",
        "noise_std", "mean_scale", "leak_scale", "rank", "steps", "lr", "seed",
    ]
    config = _resolve(args, keys)
    seed = int(config.get("seed", 0))
    rank = int(config.pop("rank", 16))
    steps = int(config.pop("steps", 300))
    lr = float(config.pop("lr", 0.02))
    suite_cfg = harness.SuiteConfig(**{**config, "seed": seed})
    if rank > min(suite_cfg.d, suite_cfg.m):
        raise UsageError(f"rank {rank} exceeds min(d, m) = {min(suite_cfg.d, suite_cfg.m)}")
    run = _run_dir(args.out, seed)
    suite = harness.generate_suite(suite_cfg)
    coll = harness.finetune_all(suite, rank=rank, steps=steps, lr=lr, seed=seed)
    harness.save_suite(suite, coll, run / "suite.lmk", run / "suite.json")
    refs = {f"task{i}": suite.references[i] for i in range(suite.n_tasks)}
    (run / "references.json").write_text(json.dumps(refs, indent=1))
    for task, acc in refs.items():
        print(f"{task}: fine-tuned eval accuracy {acc:.4f}")
    _write_manifest(run, "train-toy", {**config, "rank": rank, "steps": steps, "lr": lr})
    return 0


def cmd_diagnose(args) -> int:
    suite, coll = _load_suite(args)
    run = _run_dir(args.out, suite.config.seed)
    wrote = False
    if args.stacks:
        wrote = True
        doc = {}
        for layer, rep in diagnostics.coverage_report(coll).items():
            doc[layer] = {
                "per_task": rep.per_task,
                "per_task_sum": rep.per_task_sum,
                "aware_erank": rep.aware_erank,
                "agnostic_erank": rep.agnostic_erank,
                "warnings": rep.warnings,
            }
        (run / "coverage.json").write_text(json.dumps(doc, indent=1))
    if args.xi:
        wrote = True
        doc = {
            layer: diagnostics.xi_protocol(coll, suite, layer, lam=args.lam)
            for layer in coll.layer_ids
        }
        (run / "xi.json").write_text(json.dumps(doc, indent=1))
    if args.kappa:
        wrote = True
        doc = {}
        weights = mergers.merge_ta(coll, args.lam)
        for layer in coll.layer_ids:
            grads = [
                suite.task_loss_gradients(i, weights)[layer]
                for i in range(coll.n_tasks)
            ]
            raw_dirs = diagnostics.layer_directions(coll, layer)
            _, kappa_raw = diagnostics.anisotropy(diagnostics.jacobian(raw_dirs, grads))
            basis_b = tara.build_variant_b(coll)
            shared = basis_b.layers[layer].directions
            _, kappa_shared = diagnostics.anisotropy(diagnostics.jacobian(shared, grads))
            doc[layer] = {"raw": kappa_raw, "shared_svd": kappa_shared}
        (run / "kappa.json").write_text(json.dumps(doc, indent=1))
    if not wrote:
        raise UsageError("diagnose needs at least one of --stacks, --xi, --kappa")
    _write_manifest(
        run,
        "diagnose",
        {"stacks": args.stacks, "xi": args.xi, "kappa": args.kappa, "lam": args.lam},
    )
    print(f"diagnostics written to {run}")
    return 0


def _save_weights(weights: dict, layer_ids: list[str], path):
    shell = AdapterCollection(
        layer_ids=list(layer_ids),
        task_ids=[],
        base={l: weights[l] for l in layer_ids},
        adapters={l: [] for l in layer_ids},
    )
    save_collection(shell, path)


def _merge_with_method(coll, suite, method, rho, config):
    """Dispatch any method name to merged weights; returns (weights, trace|None)."""
    if method in mergers.METHODS:
        payload = {k: v for k, v in config.items() if k != "seed"}
        cfg = mergers.MergeConfig.from_dict({"method": method, **payload})
        return mergers.run_merge(coll, cfg), None
    optim = tara.OptimConfig(
        seed=int(config.get("seed", 0)),
        max_iters=int(config.get("iters", 500)),
        lr=float(config.get("lr", 0.001)),
        batch_size=int(config.get("batch_size", 16)),
    )
    if method == "adamerging":
        weights, _, trace = tara.adamerging_baseline(
            coll, suite, tara.OptimConfig(**{**optim.__dict__, "phi_init": 0.3})
        )
        return weights, trace
    if method in ("tara-a", "tara-b"):
        weights, _, trace = tara.merge_tara(
            coll,
            suite,
            rho,
            variant=method[-1],
            optim=optim,
            alpha=float(config.get("alpha", 1.0)),
        )
        return weights, trace
    raise UsageError(f"unknown method {method!r}; choose from {ALL_METHODS}")


def cmd_merge(args) -> int:
    keys = [
        "method", "lam", "trim_fraction", "drop_prob", "k_clusters",
        "lego_reweight", "rng_seed", "target_rank", "alpha", "iters", "lr",
        "batch_size", "seed", "preference",
    ]
    config = _resolve(args, keys)
    method = config.pop("method", None)
    if method is None:
        raise UsageError("merge requires --method")
    if method not in ALL_METHODS:
        raise UsageError(f"unknown method {method!r}; choose from {ALL_METHODS}")
    suite, coll = _load_suite(args)
    rho = (
        _parse_preference(config.pop("preference"), suite.n_tasks)
        if "preference" in config
        else np.full(suite.n_tasks, 1.0 / suite.n_tasks)
    )
    seed = int(config.get("seed", 0))
    run = _run_dir(args.out, seed)
    weights, trace = _merge_with_method(coll, suite, method, rho, config)
    _save_weights(weights, coll.layer_ids, run / "merged.lmk")
    report = harness.evaluate(weights, suite)
    report.hits_at = harness.evaluate_joint(weights, suite, ks=(1, 3, 5))
    _write_report(run, "report.json", report)
    if trace is not None:
        _write_trace(run, "trace.csv", trace)
    _write_manifest(run, "merge", {"method": method, "preference": rho.tolist(), **config})
    print(
        f"{method}: avg normalized accuracy {report.avg_normalized:.4f} "
        f"(per task: {', '.join(f'{v:.4f}' for v in report.normalized)})"
    )
    return 0


def _sweep_preferences(args, n_tasks: int) -> list[np.ndarray]:
    if args.preferences:
        try:
            rows = json.loads(Path(args.preferences).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read preferences: {exc}") from exc
        if not rows:
            raise UsageError("preference list is empty")
        return [_parse_preference(",".join(map(str, r)), n_tasks) for r in rows]
    if args.random is None:
        raise UsageError("sweep needs --preferences FILE or --random K")
    if args.random < 1:
        raise UsageError("--random must be positive")
    fixed = {}
    if args.fixed:
        for pair in args.fixed.split(","):
            try:
                idx, val = pair.split(":")
                fixed[int(idx)] = float(val)
            except ValueError as exc:
                raise UsageError(f"bad --fixed entry {pair!r}") from exc
    if any(i < 0 or i >= n_tasks for i in fixed) or any(v < 0 for v in fixed.values()):
        raise UsageError("--fixed indices/values out of range")
    budget = 1.0 - sum(fixed.values())
    if budget < -1e-9:
        raise UsageError("--fixed values exceed the simplex budget")
    free = [i for i in range(n_tasks) if i not in fixed]
    if not free:
        raise UsageError("no free coordinates left to sample")
    prefs = []
    for k in range(args.random):
        gen = substream(args.seed or 0, "sweep", k)
        # uniform Dirichlet over the free coordinates, scaled to the leftover mass
        sample = gen.dirichlet(np.ones(len(free))) * max(budget, 0.0)
        rho = np.zeros(n_tasks)
        for i, v in fixed.items():
            rho[i] = v
        rho[free] = sample
        prefs.append(rho)
    return prefs


def cmd_sweep(args) -> int:
    suite, coll = _load_suite(args)
    method = args.method or "tara-b"
    if method not in ALL_METHODS:
        raise UsageError(f"unknown method {method!r}; choose from {ALL_METHODS}")
    prefs = _sweep_preferences(args, suite.n_tasks)
    seed = args.seed or 0
    run = _run_dir(args.out, seed)
    config = {"seed": seed, "iters": args.iters} if args.iters else {"seed": seed}

    def merge_fn(c, s, rho):
        weights, _ = _merge_with_method(c, s, method, rho, config)
        return weights

    results = harness.sweep_preferences(coll, suite, prefs, merge_fn)
    with open(run / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [f"rho{i}" for i in range(suite.n_tasks)]
            + [f"acc{i}" for i in range(suite.n_tasks)]
        )
        for rho, report in results:
            writer.writerow(
                [repr(float(v)) for v in rho]
                + [repr(float(v)) for v in report.normalized]
            )
    _write_manifest(run, "sweep", {"method": method, "n_points": len(prefs), "seed": seed})
    print(f"sweep of {len(prefs)} points written to {run / 'sweep.csv'}")
    return 0


def cmd_eval(args) -> int:
    suite, _ = _load_suite(args)
    merged = load_collection(args.weights)
    weights = {l: merged.base[l] for l in merged.layer_ids}
    run = _run_dir(args.out, suite.config.seed)
    report = harness.evaluate(weights, suite)
    report.hits_at = harness.evaluate_joint(weights, suite, ks=(1, 3, 5))
    _write_report(run, "report.json", report)
    _write_manifest(run, "eval", {"weights": str(args.weights)})
    print(f"avg normalized accuracy {report.avg_normalized:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loramerge",
        description="LoRA adapter merging, diagnostics, and preference sweeps",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-toy", help="generate a synthetic suite and fine-tune adapters")
    p.add_argument("--config", help="JSON config file (flags override)")
    p.add_argument("--out", default="runs", help="output root directory")
    for flag, typ in [
        ("--seed", int), ("--n-tasks", int), ("--d", int), ("--m", int),
        ("--n-classes", int), ("--n-train", int), ("--n-eval", int),
        ("--n-adapt", int), ("--noise-std", float), ("--mean-scale", float),
        ("--leak-scale", float), ("--rank", int), ("--steps", int), ("--lr", float),
    ]:
        p.add_argument(flag, type=typ)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("diagnose", help="coverage, misalignment, anisotropy reports")
    p.add_argument("container")
    p.add_argument("--sidecar", required=True)
    p.add_argument("--out", default="runs")
    p.add_argument("--stacks", action="store_true")
    p.add_argument("--xi", action="store_true")
    p.add_argument("--kappa", action="store_true")
    p.add_argument("--lam", type=float, default=0.3)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("merge", help="merge adapters and evaluate")
    p.add_argument("container")
    p.add_argument("--sidecar", required=True)
    p.add_argument("--out", default="runs")
    p.add_argument("--config")
    p.add_argument("--method")
    p.add_argument("--preference", help="comma-separated simplex vector")
    for flag, typ in [
        ("--lam", float), ("--trim-fraction", float), ("--drop-prob", float),
        ("--k-clusters", int), ("--lego-reweight", str), ("--rng-seed", int),
        ("--target-rank", int), ("--alpha", float), ("--iters", int),
        ("--lr", float), ("--batch-size", int), ("--seed", int),
    ]:
        p.add_argument(flag, type=typ)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("sweep", help="preference sweep: one merge + eval per point")
    p.add_argument("container")
    p.add_argument("--sidecar", required=True)
    p.add_argument("--out", default="runs")
    p.add_argument("--method")
    p.add_argument("--preferences", help="JSON file with a list of preference rows")
    p.add_argument("--random", type=int, help="sample K random simplex points")
    p.add_argument("--fixed", help='pin coordinates, e.g. "0:0.125,1:0.125"')
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate stored merged weights against a suite")
    p.add_argument("container")
    p.add_argument("--sidecar", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", default="runs")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, mergers.MergeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures (IO, numeric aborts)
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
