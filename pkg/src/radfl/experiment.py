"""Experiment configs, seed derivation and sweep execution.

A config is one JSON object. Sweep axes are ``topology.edge_density``,
``topology.relays`` (each a number or a list), ``packet_lengths`` and
``protocols``; every combination runs for ``replications`` seeds.

Seeds come from ``derive_seed(root_seed, stage, *indices)``:

* ``"topology"`` / ``"relays"``: per (density, relays, replication) cell
* ``"losses"``: per cell, shared by every protocol and K so that
  comparisons use common random numbers
* ``"task"``: once, unless ``task.seed`` is given

A seed never depends on which other protocols or K values are present.
"""
from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .analysis import BoundInputs, bound_report
from .errors import ConfigError, DomainError, RadflError
from .learning import (QuadraticTask, make_logistic_task, make_mlp_task, make_quadratic_task, task_constants)
from .netmodel import (REFERENCE_COORDINATES, ChannelParams, NetworkGraph, add_random_relays, build_from_coordinates,
                       build_random_geometric)
from .protocol import ELEMENT_DRAWS, SCHEMES, SEGMENT_DRAWS, ProtocolConfig, run_protocol
from .routing import assign_slots, min_per_routes

SCHEMA = "radfl-metrics/1"
TAIL = 10  # rounds averaged into ``tail_mean_loss``
METRIC_COLUMNS = ("replication", "edge_density", "relays", "round", "protocol", "scheme", "K", "mean_loss",
                  "max_pairwise_distance", "lambda_sq_mean", "dist_to_opt", "cumulative_traffic_bits",
                  "cumulative_slots", "per_client_loss")

_TOP = {"name", "root_seed", "topology", "channel", "task", "protocols", "packet_lengths", "rounds",
        "replications", "sampling", "error_free", "model_size_bits", "compare_trajectories", "bounds", "output"}
_TOPOLOGY = {"kind", "coordinates", "graph", "edge_density", "scale", "n_clients", "area", "relays", "relay_box"}
_TASK = {"kind", "dim", "seed", "diagonal", "mu", "L", "spread", "shift", "reg", "feature_scale", "hidden"}
_PROTOCOL = {"protocol", "scheme", "J", "aggregator", "epochs", "lr", "include_downlink"}
_CHANNEL = {f.name for f in dataclasses.fields(ChannelParams)}
_BOUNDS = {"lambda_max"}


def derive_seed(root_seed: int, stage: str, *indices) -> int:
    """64-bit seed from ``sha256("root|stage|i|j|...")``."""
    text = "|".join([str(int(root_seed)), stage, *(str(i) for i in indices)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


# -- config validation -------------------------------------------------------

def _key_line(text: str, path: tuple) -> int:
    """Best-effort line of the last key in ``path`` (1 if not found)."""
    pos = 0
    for key in path:
        if isinstance(key, int):
            continue
        m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
        if m is None:
            break
        pos = m.start()
    return text.count("\n", 0, pos) + 1


class _Checker:
    def __init__(self, source: str, text: str):
        self.source, self.text, self.diags = source, text, []

    def error(self, path: tuple, msg: str):
        self.diags.append(f"{self.source}:{_key_line(self.text, path)}: {msg}")

    def keys(self, block, allowed, path):
        if not isinstance(block, dict):
            self.error(path, f"{'.'.join(map(str, path)) or 'config'} must be an object")
            return False
        for k in sorted(set(block) - allowed):
            self.error(path + (k,), f"unknown key {k!r}")
        return True

    def number(self, block, key, path, lo=None, integer=False, required=False, strict=False):
        if key not in block:
            if required:
                self.error(path, f"missing required key {key!r}")
            return
        v = block[key]
        ok = isinstance(v, int) if integer else isinstance(v, (int, float))
        if isinstance(v, bool) or not ok or (not integer and not math.isfinite(v)):
            self.error(path + (key,), f"{key} must be {'an integer' if integer else 'a finite number'}")
            return
        if lo is not None and (v <= lo if strict else v < lo):
            self.error(path + (key,), f"{key} must be {'>' if strict else '>='} {lo}")


def _as_list(v):
    return list(v) if isinstance(v, list) else [v]


def validate_config(cfg: dict, source: str = "<config>", text: str | None = None) -> None:
    """Collect every problem in ``cfg``; raise ``ConfigError`` if there are any."""
    text = json.dumps(cfg, indent=1) if text is None else text
    c = _Checker(source, text)
    if not c.keys(cfg, _TOP, ()):
        raise ConfigError(c.diags)
    c.number(cfg, "root_seed", (), lo=0, integer=True)
    c.number(cfg, "rounds", (), lo=1, integer=True, required=True)
    c.number(cfg, "replications", (), lo=1, integer=True)
    c.number(cfg, "model_size_bits", (), lo=0, strict=True)
    if cfg.get("sampling", SEGMENT_DRAWS) not in (SEGMENT_DRAWS, ELEMENT_DRAWS):
        c.error(("sampling",), f"sampling must be {SEGMENT_DRAWS!r} or {ELEMENT_DRAWS!r}")
    for flag in ("error_free", "compare_trajectories"):
        if flag in cfg and not isinstance(cfg[flag], bool):
            c.error((flag,), f"{flag} must be true or false")
    ks = cfg.get("packet_lengths")
    if not isinstance(ks, list) or not ks or any(isinstance(k, bool) or not isinstance(k, int) or k < 1 for k in ks):
        c.error(("packet_lengths",), "packet_lengths must be a non-empty list of positive integers")

    topo = cfg.get("topology")
    n_clients = None
    if topo is None:
        c.error((), "missing required key 'topology'")
    elif c.keys(topo, _TOPOLOGY, ("topology",)):
        kind = topo.get("kind")
        P = ("topology",)
        if kind == "reference":
            n_clients = len(REFERENCE_COORDINATES)
        elif kind == "coordinates":
            coords = topo.get("coordinates")
            if not isinstance(coords, list) or len(coords) < 2 or any(
                    not isinstance(xy, list) or len(xy) != 2 for xy in coords):
                c.error(P + ("coordinates",), "coordinates must be a list of [x, y] pairs")
            else:
                n_clients = len(coords)
        elif kind == "random":
            c.number(topo, "n_clients", P, lo=2, integer=True, required=True)
            if "area" not in topo:
                c.error(P, "missing required key 'area'")
            n_clients = topo.get("n_clients")
        elif kind == "graph":
            try:
                g = NetworkGraph.from_dict(topo.get("graph", {}))
                n_clients = g.n_participants
            except (KeyError, TypeError, ValueError, RadflError) as exc:
                c.error(P + ("graph",), f"invalid graph: {exc}")
            for k in ("relays", "edge_density"):
                if k in topo:
                    c.error(P + (k,), f"{k} does not apply to an explicit graph")
        else:
            c.error(P + ("kind",), "topology.kind must be one of 'reference', 'coordinates', 'random', 'graph'")
        if kind != "graph":
            for d in _as_list(topo.get("edge_density", 0.5)):
                if isinstance(d, bool) or not isinstance(d, (int, float)) or not 0 < d <= 1:
                    c.error(P + ("edge_density",), "edge_density values must lie in (0, 1]")
            for r in _as_list(topo.get("relays", 0)):
                if isinstance(r, bool) or not isinstance(r, int) or r < 0:
                    c.error(P + ("relays",), "relays values must be nonnegative integers")
        c.number(topo, "scale", P, lo=0, strict=True)

    ch = cfg.get("channel", {})
    if c.keys(ch, _CHANNEL, ("channel",)):
        try:
            ChannelParams.from_dict(ch)
        except (TypeError, ValueError) as exc:
            c.error(("channel",), f"invalid channel parameters: {exc}")

    task = cfg.get("task")
    if task is None:
        c.error((), "missing required key 'task'")
    elif c.keys(task, _TASK, ("task",)):
        if task.get("kind") not in ("quadratic", "logistic", "mlp"):
            c.error(("task", "kind"), "task.kind must be 'quadratic', 'logistic' or 'mlp'")
        c.number(task, "dim", ("task",), lo=1, integer=True, required=True)
        c.number(task, "seed", ("task",), lo=0, integer=True)

    protos = cfg.get("protocols")
    if not isinstance(protos, list) or not protos:
        c.error(("protocols",), "protocols must be a non-empty list")
        protos = []
    for i, pr in enumerate(protos):
        P = ("protocols", i)
        if not c.keys(pr, _PROTOCOL, P):
            continue
        name = pr.get("protocol")
        if name not in ("raa", "aayg", "cfl"):
            c.error(P + ("protocol",), "protocol must be 'raa', 'aayg' or 'cfl'")
        if pr.get("scheme", SCHEMES[0]) not in SCHEMES:
            c.error(P + ("scheme",), f"scheme must be one of {list(SCHEMES)}")
        c.number(pr, "J", P, lo=1, integer=True)
        c.number(pr, "epochs", P, lo=1, integer=True)
        c.number(pr, "lr", P, lo=0, strict=True)
        if name == "cfl":
            agg = pr.get("aggregator")
            if isinstance(agg, bool) or not isinstance(agg, int):
                c.error(P + ("aggregator",), "C-FL needs an integer aggregator id")
            elif n_clients is not None and not 0 <= agg < n_clients:
                c.error(P + ("aggregator",), f"aggregator must be a participant id in [0, {n_clients})")
    b = cfg.get("bounds", {})
    if c.keys(b, _BOUNDS, ("bounds",)):
        c.number(b, "lambda_max", ("bounds",), lo=0)
    if c.diags:
        raise ConfigError(c.diags)


def load_config(path: str) -> dict:
    with open(path) as fh:
        text = fh.read()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}:{exc.lineno}: {exc.msg}"]) from None
    validate_config(cfg, path, text)
    return cfg


def config_hash(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k != "output"}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# -- building blocks ---------------------------------------------------------

class StageError(RadflError):
    def __init__(self, stage: str, exc: BaseException):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {type(exc).__name__}: {exc}")


def build_task(cfg: dict, n_clients: int):
    t = cfg["task"]
    seed = t.get("seed", derive_seed(cfg.get("root_seed", 0), "task") % 2 ** 32)
    kind, dim = t["kind"], t["dim"]
    if kind == "quadratic":
        kw = {k: t[k] for k in ("mu", "L", "spread", "diagonal") if k in t}
        return make_quadratic_task(n_clients, dim, seed, **kw)
    kw = {k: t[k] for k in ("shift", "reg", "feature_scale") if k in t}
    if kind == "logistic":
        return make_logistic_task(n_clients, dim - 1, seed, **kw)
    hidden = t.get("hidden", 8)
    # dim counts every MLP parameter; solve hidden*(d + 2) + 1 = dim for d
    d = (dim - 1) // hidden - 2
    if d < 1 or hidden * (d + 2) + 1 != dim:
        raise DomainError(f"MLP dim {dim} is not hidden*(features+2)+1 for hidden={hidden}")
    return make_mlp_task(n_clients, d, seed, hidden=hidden, **kw)


def build_graph(cfg: dict, density: float, relays: int, rep: int, di: int, ri: int) -> NetworkGraph:
    topo = cfg["topology"]
    params = ChannelParams.from_dict(cfg.get("channel", {}))
    root = cfg.get("root_seed", 0)
    kind = topo["kind"]
    scale = topo.get("scale", 1.0)
    if kind == "graph":
        return NetworkGraph.from_dict({**topo["graph"], "channel": params.to_dict()})
    if kind == "random":
        return build_random_geometric(topo["n_clients"], relays, topo["area"], density,
                                      derive_seed(root, "topology", di, ri, rep), params)
    coords = REFERENCE_COORDINATES if kind == "reference" else topo["coordinates"]
    coords = [(float(x) * scale, float(y) * scale) for x, y in coords]
    if relays == 0:
        return build_from_coordinates(coords, density, params)
    box = topo.get("relay_box")
    return add_random_relays(coords, relays, density, derive_seed(root, "relays", di, ri, rep), params,
                             box=tuple(box) if box else None)


def lossless(graph: NetworkGraph) -> NetworkGraph:
    links = {k: dataclasses.replace(lk, bit_success=1.0) for k, lk in graph.links.items()}
    return NetworkGraph(graph.nodes, links, graph.params, graph.edge_density)


def _protocol_configs(cfg: dict, K: int) -> list[ProtocolConfig]:
    out = []
    for pr in cfg["protocols"]:
        out.append(ProtocolConfig(pr["protocol"], pr.get("scheme", SCHEMES[0]), K, cfg["rounds"], 0,
                                  pr.get("J", 1), pr.get("aggregator"), pr.get("epochs", 1), pr.get("lr", 0.1),
                                  cfg.get("sampling", SEGMENT_DRAWS)))
    return out


def sweep_cells(cfg: dict) -> list[tuple]:
    topo = cfg["topology"]
    dens = [None] if topo["kind"] == "graph" else _as_list(topo.get("edge_density", 0.5))
    rels = [0] if topo["kind"] == "graph" else _as_list(topo.get("relays", 0))
    reps = range(cfg.get("replications", 1))
    return [(di, d, ri, r, rep) for (di, d), (ri, r), rep in itertools.product(enumerate(dens), enumerate(rels), reps)]


@dataclass
class CellResult:
    cell: tuple
    rows: list = field(default_factory=list)
    runs: list = field(default_factory=list)
    routes: dict = field(default_factory=dict)
    bounds: dict = field(default_factory=dict)
    divergence: float | None = None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def run_cell(cfg: dict, cell: tuple) -> CellResult:
    """Every protocol and K for one (density, relays, replication) cell."""
    di, density, ri, relays, rep = cell
    stage = "topology"
    try:
        graph = build_graph(cfg, density, relays, rep, di, ri)
        stage = "task"
        task = build_task(cfg, graph.n_participants)
        w_star = task.optimum() if isinstance(task, QuadraticTask) else None
        model_bits = cfg.get("model_size_bits", task.dim * graph.params.bits_per_element)
        error_free = cfg.get("error_free", False)
        net = lossless(graph) if error_free else graph
        res = CellResult(cell)
        ref = None
        for K in cfg["packet_lengths"]:
            stage = f"routes K={K}"
            plan = min_per_routes(graph, K)
            if error_free:
                plan = plan.error_free()
            if rep == 0:
                res.routes[f"{density}/{relays}/{K}"] = plan.to_dict()
                res.bounds[f"{density}/{relays}/{K}"] = _bounds_entry(cfg, task, plan, K)
            for pr, pc in zip(cfg["protocols"], _protocol_configs(cfg, K)):
                stage = f"{pc.label} K={K}"
                sched = assign_slots(pc.protocol, net, model_bits, plan, pc.J, pc.aggregator,
                                     pr.get("include_downlink", True))
                rng = np.random.default_rng(derive_seed(cfg.get("root_seed", 0), "losses", di, ri, rep))
                traj = []
                outs = run_protocol(task, pc, rng, plan=plan, graph=net, w_star=w_star, schedule=sched,
                                    callback=(lambda o: traj.append(o.models.copy()))
                                    if cfg.get("compare_trajectories") else None)
                for o in outs:
                    m = o.metrics
                    res.rows.append([rep, density, relays, o.round, pc.protocol if pc.protocol != "aayg"
                                     else f"aayg-J{pc.J}", pc.scheme, K, m["mean_loss"],
                                     m["max_pairwise_distance"], m["lambda_sq_mean"], m.get("dist_to_opt"),
                                     m["cumulative_traffic_bits"], m["cumulative_slots"],
                                     ";".join(repr(float(x)) for x in m["per_client_loss"])])
                last = outs[-1].metrics
                res.runs.append({"replication": rep, "edge_density": density, "relays": relays, "K": K,
                                 "protocol": pc.label, "final_mean_loss": last["mean_loss"],
                                 "tail_mean_loss": float(np.mean([o.metrics["mean_loss"] for o in outs[-TAIL:]])),
                                 "final_max_pairwise_distance": last["max_pairwise_distance"],
                                 "total_slots": last["cumulative_slots"],
                                 "total_traffic_bits": last["cumulative_traffic_bits"],
                                 "slots_per_round": sched.total_slots,
                                 "traffic_bits_per_round": sched.total_traffic_bits})
                if cfg.get("compare_trajectories"):
                    arr = np.stack(traj)
                    if ref is None:
                        ref = arr
                    div = float(np.max(np.abs(arr - ref)))
                    res.divergence = div if res.divergence is None else max(res.divergence, div)
        return res
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, exc) from exc


def _bounds_entry(cfg: dict, task, plan, K: int) -> dict:
    if not isinstance(task, QuadraticTask):
        return {"skipped": "bound constants need a quadratic task"}
    pr = cfg["protocols"][0]
    consts = task_constants(task)
    try:
        inp = BoundInputs.build(consts.L, consts.mu, pr.get("lr", 0.1), pr.get("epochs", 1), task.p,
                                plan.success_matrix(K), consts.sigma_bar_sq)
    except DomainError as exc:
        return {"skipped": str(exc)}
    return bound_report(inp, cfg.get("bounds", {}).get("lambda_max")).to_dict()


# -- driver ------------------------------------------------------------------

def _median(xs):
    return float(np.median(np.asarray(xs, dtype=float)))


def summarize(runs: list) -> list:
    groups: dict = {}
    for r in runs:
        groups.setdefault((r["edge_density"] is None, r["edge_density"] or 0, r["relays"], r["protocol"], r["K"]),
                          []).append(r)
    out = []
    for key in sorted(groups):
        rs = groups[key]
        out.append({"edge_density": rs[0]["edge_density"], "relays": rs[0]["relays"], "protocol": rs[0]["protocol"],
                    "K": rs[0]["K"], "replications": len(rs),
                    "median_final_mean_loss": _median([r["final_mean_loss"] for r in rs]),
                    "median_tail_mean_loss": _median([r["tail_mean_loss"] for r in rs]),
                    "median_final_max_pairwise_distance": _median([r["final_max_pairwise_distance"] for r in rs]),
                    "total_slots": rs[0]["total_slots"], "total_traffic_bits": rs[0]["total_traffic_bits"]})
    return out


def execute(cfg: dict, jobs: int = 1) -> list[CellResult]:
    cells = sweep_cells(cfg)
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_cell, [cfg] * len(cells), cells))
    else:
        results = [run_cell(cfg, c) for c in cells]
    return results


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_experiment(cfg: dict, out_dir: str | None = None, jobs: int = 1) -> dict:
    """Run every sweep cell and write metrics.csv, summary.json, bounds.json and routes.json.

    Returns the summary dict. Outputs depend only on the config (root seed
    included), not on ``jobs``.
    """
    validate_config(cfg)
    out_dir = out_dir or cfg.get("output") or "radfl-out"
    h = config_hash(cfg)
    root = cfg.get("root_seed", 0)
    results = execute(cfg, jobs)
    os.makedirs(out_dir, exist_ok=True)
    head = {"schema": SCHEMA, "config_sha256": h, "root_seed": root}
    with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
        fh.write(f"# schema={SCHEMA} config_sha256={h} root_seed={root}\n")
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for res in results:
            for row in res.rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
    runs = [r for res in results for r in res.runs]
    summary = {**head, "name": cfg.get("name", ""), "runs": runs, "groups": summarize(runs)}
    divs = [res.divergence for res in results if res.divergence is not None]
    if divs:
        summary["max_trajectory_divergence"] = max(divs)
    _dump(os.path.join(out_dir, "summary.json"), summary)
    bounds = {k: v for res in results for k, v in res.bounds.items()}
    _dump(os.path.join(out_dir, "bounds.json"), {**head, "reports": bounds})
    routes = {k: v for res in results for k, v in res.routes.items()}
    _dump(os.path.join(out_dir, "routes.json"), {**head, "plans": routes})
    return summary


def sweep_aggregator(cfg: dict, candidates=None, jobs: int = 1) -> list[dict]:
    """Run the C-FL protocol once per candidate aggregator, best first.

    Ranking is by median final mean loss over every cell and K, ties by id.
    """
    validate_config(cfg)
    base = next((p for p in cfg["protocols"] if p["protocol"] == "cfl"), None)
    if base is None:
        raise ConfigError(["<config>:1: sweep-aggregator needs a 'cfl' entry in protocols"])
    probe = build_graph(cfg, *[sweep_cells(cfg)[0][i] for i in (1, 3, 4, 0, 2)])
    ids = range(probe.n_participants) if candidates is None else candidates
    ranking = []
    for a in ids:
        sub = {**cfg, "protocols": [{**base, "aggregator": int(a)}], "compare_trajectories": False}
        runs = [r for res in execute(sub, jobs) for r in res.runs]
        ranking.append({"aggregator": int(a), "median_final_mean_loss": _median([r["final_mean_loss"] for r in runs])})
    ranking.sort(key=lambda r: (r["median_final_mean_loss"], r["aggregator"]))
    for i, r in enumerate(ranking):
        r["rank"] = i + 1
    return ranking
