"""Command-line entry point and canned experiment recipes.

Exit status: 0 on success, 2 for an invalid config or input file (one
``file:line: message`` diagnostic per problem on stderr), 3 when a run
fails (the failing stage is named on stderr).
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .analysis import BoundInputs, bound_report
from .errors import ConfigError, DomainError, RadflError
from .experiment import (StageError, config_hash, load_config, run_experiment, sweep_aggregator)
from .netmodel import NetworkGraph
from .routing import constrained_admission, min_per_routes

MBIT = 1e6


# -- recipes -----------------------------------------------------------------

def errorfree_config(rounds: int = 50) -> dict:
    return {
        "name": "errorfree-equivalence",
        "topology": {"kind": "reference", "edge_density": 0.5},
        "task": {"kind": "quadratic", "dim": 20, "seed": 1},
        "protocols": [{"protocol": "raa", "scheme": "coeff", "lr": 0.2},
                      {"protocol": "raa", "scheme": "substitution", "lr": 0.2},
                      {"protocol": "cfl", "aggregator": 6, "lr": 0.2}],
        "packet_lengths": [4],
        "rounds": rounds,
        "error_free": True,
        "compare_trajectories": True,
    }


def overhead_config() -> dict:
    return {
        "name": "overhead-table",
        "topology": {"kind": "reference", "edge_density": 0.5},
        "task": {"kind": "quadratic", "dim": 4, "seed": 1},
        "protocols": [{"protocol": "aayg", "J": 1}, {"protocol": "aayg", "J": 5},
                      {"protocol": "raa"}, {"protocol": "cfl", "aggregator": 6}],
        "packet_lengths": [1],
        "rounds": 1,
        "model_size_bits": 38.72 * MBIT,
    }


def relay_sweep_config(replications: int = 10, rounds: int = 30) -> dict:
    return {
        "name": "relay-sweep",
        "topology": {"kind": "reference", "scale": 2.0, "edge_density": 0.5, "relays": [0, 7, 14, 28],
                     "relay_box": [11200.0, 11200.0]},
        "task": {"kind": "quadratic", "dim": 1024, "seed": 3, "diagonal": True},
        "protocols": [{"protocol": "raa", "scheme": "coeff", "lr": 0.2}],
        "packet_lengths": [32],
        "rounds": rounds,
        "replications": replications,
        "sampling": "element",
    }


def degradation_config(task: str = "quadratic", replications: int = 10) -> dict:
    if task == "quadratic":
        block, lr, rounds = {"kind": "quadratic", "dim": 1024, "seed": 3, "diagonal": True}, 0.2, 30
    else:
        block, lr, rounds = {"kind": "logistic", "dim": 1024, "seed": 7, "shift": 1.5}, 0.5, 40
    return {
        "name": f"degradation-{task}",
        "topology": {"kind": "reference", "scale": 1.5, "edge_density": [0.5, 0.9]},
        "task": block,
        "protocols": [{"protocol": "raa", "scheme": "coeff", "lr": lr},
                      {"protocol": "raa", "scheme": "substitution", "lr": lr},
                      {"protocol": "aayg", "J": 1, "lr": lr}],
        "packet_lengths": [4, 32, 256],
        "rounds": rounds,
        "replications": replications,
        "sampling": "element",
    }


def errorfree_reference_config(cfg: dict) -> dict:
    """Error-free C-FL on the relay sweep's base topology (no relays)."""
    return {**cfg, "name": "errorfree-cfl", "error_free": True, "replications": 1,
            "topology": {**cfg["topology"], "relays": 0},
            "protocols": [{**cfg["protocols"][0], "protocol": "cfl", "aggregator": 6}]}


def check_errorfree(summary: dict) -> dict:
    div = summary["max_trajectory_divergence"]
    return {"max_trajectory_divergence": div, "pass": div <= 1e-12}


def check_overhead(summary: dict) -> dict:
    rows = {g["protocol"]: g["total_traffic_bits"] / MBIT for g in summary["groups"]}
    ok = abs(rows["aayg-J1-coeff"] - 387.2) < 1e-9 and abs(rows["aayg-J5-coeff"] - 1936.0) < 1e-9
    return {"traffic_mbit": rows, "pass": ok}


def _ordering_by_rep(runs, key, labels):
    """Per replication: (ordered across labels at every K, non-decreasing in K)."""
    reps = sorted({r["replication"] for r in runs})
    vals = {(r["replication"], r["edge_density"], r["relays"], r["protocol"], r["K"]): r[key] for r in runs}
    cells = sorted({(r["edge_density"], r["relays"]) for r in runs})
    Ks = sorted({r["K"] for r in runs})
    out = {}
    for cell in cells:
        for rep in reps:
            v = lambda lab, K: vals[(rep, *cell, lab, K)]
            order = all(v(a, K) <= v(b, K) for K in Ks for a, b in zip(labels, labels[1:]))
            mono = all(v(lab, a) <= v(lab, b) for lab in labels for a, b in zip(Ks, Ks[1:]))
            out[(cell, rep)] = (order, mono)
    return out


def check_degradation(summary: dict, need: int = 8) -> dict:
    labels = ["raa-coeff", "raa-substitution", "aayg-J1-coeff"]
    res = _ordering_by_rep(summary["runs"], "tail_mean_loss", labels)
    per_density = {}
    for (cell, rep), (order, mono) in res.items():
        d = per_density.setdefault(str(cell[0]), {"ordering": 0, "monotone_in_K": 0, "replications": 0})
        d["ordering"] += order
        d["monotone_in_K"] += mono
        d["replications"] += 1
    ok = all(d["ordering"] >= need and d["monotone_in_K"] >= need for d in per_density.values())
    return {"per_density": per_density, "pass": ok}


def check_relay_sweep(summary: dict, reference_loss: float | None = None) -> dict:
    med = {g["relays"]: g["median_tail_mean_loss"] for g in summary["groups"]}
    counts = sorted(med)
    out = {"median_tail_loss": {str(k): med[k] for k in counts},
           "non_increasing": all(med[a] >= med[b] for a, b in zip(counts, counts[1:]))}
    ok = med[counts[-1]] <= med[counts[0]]
    if reference_loss is not None:
        gap = abs(med[counts[-1]] - reference_loss) / reference_loss
        out["errorfree_cfl_loss"] = reference_loss
        out["relative_gap_most_relays"] = gap
        ok = ok and gap <= 0.05
    out["pass"] = ok
    return out


def run_recipe(name: str, out_dir: str, seed: int | None = None, jobs: int = 1,
               replications: int | None = None) -> dict:
    reps = {} if replications is None else {"replications": replications}
    if name == "errorfree-equivalence":
        cfg, check = errorfree_config(), check_errorfree
    elif name == "overhead-table":
        cfg, check = overhead_config(), check_overhead
    elif name == "relay-sweep":
        cfg, check = {**relay_sweep_config(), **reps}, None
    elif name in ("degradation", "degradation-logistic"):
        cfg = {**degradation_config("logistic" if name.endswith("logistic") else "quadratic"), **reps}
        check = check_degradation
    else:
        raise ConfigError([f"<recipe>:1: unknown recipe {name!r}; choose from {sorted(RECIPES)}"])
    if seed is not None:
        cfg["root_seed"] = seed
    summary = run_experiment(cfg, out_dir, jobs)
    if name == "relay-sweep":
        ref = run_experiment(errorfree_reference_config(cfg), os.path.join(out_dir, "errorfree-cfl"), jobs)
        summary["check"] = check_relay_sweep(summary, ref["groups"][0]["median_tail_mean_loss"])
    else:
        summary["check"] = check(summary)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


RECIPES = {
    "errorfree-equivalence": errorfree_config,
    "overhead-table": overhead_config,
    "relay-sweep": relay_sweep_config,
    "degradation": degradation_config,
    "degradation-logistic": lambda: degradation_config("logistic"),
}


# -- commands ----------------------------------------------------------------

def _read_json(path: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}:{exc.lineno}: {exc.msg}"]) from None
    except OSError as exc:
        raise ConfigError([f"{path}:1: {exc.strerror}"]) from None


def _emit(text: str, out: str | None):
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["root_seed"] = args.seed
    out = args.out or cfg.get("output") or os.path.splitext(os.path.basename(args.config))[0] + "-out"
    summary = run_experiment(cfg, out, args.jobs)
    print(f"wrote {out}/ (config_sha256={summary['config_sha256'][:12]}, {len(summary['runs'])} runs)")
    return 0


def cmd_routes(args) -> int:
    try:
        graph = NetworkGraph.from_dict(_read_json(args.graph))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError([f"{args.graph}:1: invalid graph: {exc}"]) from None
    if args.budget:
        doc = _read_json(args.budget)
        budgets = doc.get("budgets", doc) if isinstance(doc, dict) else doc
        if isinstance(budgets, dict):
            budgets = {int(k): v for k, v in budgets.items()}
        n = graph.n_participants
        p = doc.get("p", [1.0 / n] * n) if isinstance(doc, dict) else [1.0 / n] * n
        plan = constrained_admission(graph, budgets, p, args.K)
    else:
        plan = min_per_routes(graph, args.K)
    _emit(plan.to_json(indent=2), args.out)
    return 0


def cmd_bounds(args) -> int:
    try:
        inp = BoundInputs.from_dict(_read_json(args.inputs))
    except (KeyError, TypeError, DomainError) as exc:
        raise ConfigError([f"{args.inputs}:1: {exc}"]) from None
    _emit(bound_report(inp, args.lambda_max).to_json(indent=2), args.out)
    return 0


def cmd_sweep_aggregator(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["root_seed"] = args.seed
    ranking = sweep_aggregator(cfg, jobs=args.jobs)
    text = json.dumps({"config_sha256": config_hash(cfg), "root_seed": cfg.get("root_seed", 0),
                       "ranking": ranking}, indent=2)
    _emit(text, args.out)
    return 0


def cmd_recipe(args) -> int:
    if args.print_config:
        if args.name not in RECIPES:
            raise ConfigError([f"<recipe>:1: unknown recipe {args.name!r}; choose from {sorted(RECIPES)}"])
        print(json.dumps(RECIPES[args.name](), indent=2))
        return 0
    summary = run_recipe(args.name, args.out or f"{args.name}-out", args.seed, args.jobs, args.replications)
    print(json.dumps(summary["check"], indent=2))
    return 0 if summary["check"]["pass"] else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="radfl", description="Route-and-aggregate D-FL simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run an experiment config")
    s.add_argument("config")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("routes", help="min-PER (or budgeted) routes for a graph JSON")
    r.add_argument("graph")
    r.add_argument("--budget")
    r.add_argument("--K", type=int, default=1, help="elements per packet")
    r.add_argument("--out")
    r.set_defaults(func=cmd_routes)

    b = sub.add_parser("bounds", help="bound report for a BoundInputs JSON")
    b.add_argument("inputs")
    b.add_argument("--lambda-max", type=float)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bounds)

    a = sub.add_parser("sweep-aggregator", help="rank C-FL aggregators by final loss")
    a.add_argument("config")
    a.add_argument("--seed", type=int)
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--out")
    a.set_defaults(func=cmd_sweep_aggregator)

    c = sub.add_parser("recipe", help="run a canned comparison scenario")
    c.add_argument("name", help=", ".join(sorted(RECIPES)))
    c.add_argument("--out")
    c.add_argument("--seed", type=int)
    c.add_argument("--jobs", type=int, default=1)
    c.add_argument("--replications", type=int)
    c.add_argument("--print-config", action="store_true")
    c.set_defaults(func=cmd_recipe)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for d in exc.diagnostics:
            print(d, file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (RadflError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error: stage {args.command!r} failed: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
