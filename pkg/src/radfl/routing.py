"""Minimum end-to-end packet-error routing and TDMA overhead accounting.

Paths are ranked by

1. larger end-to-end packet success (the product of hop success rates),
2. fewer hops,
3. lexicographically smaller node sequence.

Products are compared exactly as rationals built from the binary64 hop
rates, so tie detection never depends on the summation order of logs.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import SizeLimit, Unreachable
from .netmodel import NetworkGraph, packet_success_rate

BRUTE_FORCE_MAX_NODES = 8


@dataclass(frozen=True)
class _Label:
    logp: float  # float log of the product, used only as a fast pre-filter
    prod: Fraction
    hops: int
    path: tuple[int, ...]


def _cat(a: _Label, b: _Label) -> _Label:
    return _Label(a.logp + b.logp, a.prod * b.prod, a.hops + b.hops, a.path + b.path[1:])


def _better(a: _Label, b: _Label | None) -> bool:
    """True if ``a`` strictly beats ``b``."""
    if b is None:
        return True
    if math.isfinite(a.logp) and math.isfinite(b.logp):
        gap = a.logp - b.logp
        if abs(gap) > 1e-9 * (1.0 + abs(a.logp) + abs(b.logp)):
            return gap > 0
    if a.prod != b.prod:
        return a.prod > b.prod
    if a.hops != b.hops:
        return a.hops < b.hops
    return a.path < b.path


def _hop_label(m: int, n: int, s: float) -> _Label:
    return _Label(math.log(s) if s > 0 else -math.inf, Fraction(s), 1, (m, n))


def _self_label(i: int) -> _Label:
    return _Label(0.0, Fraction(1), 0, (i,))


@dataclass
class RoutePlan:
    """Routes between every ordered pair of participants.

    ``hops[(m, n)]`` is the node sequence from ``m`` to ``n`` (empty for
    ``m == n`` or when no admissible route exists); ``e2e_success[m, n]`` is
    the end-to-end packet success for ``K``-element packets.
    """

    n_participants: int
    K: int
    bits_per_element: int
    hops: dict
    hop_bit_success: dict
    e2e_success: np.ndarray
    infeasible: list = field(default_factory=list)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def participants(self) -> range:
        return range(self.n_participants)

    def success_matrix(self, elements: int | None = None) -> np.ndarray:
        """End-to-end success for packets of ``elements`` elements (default ``K``)."""
        if elements is None or elements == self.K:
            return self.e2e_success
        if elements not in self._cache:
            self._cache[elements] = _success_matrix(self.n_participants, self.hops, self.hop_bit_success,
                                                    elements, self.bits_per_element)
        return self._cache[elements]

    def route(self, m: int, n: int) -> tuple[int, ...]:
        return self.hops[(m, n)]

    def to_dict(self) -> dict:
        pairs = []
        for m in self.participants:
            for n in self.participants:
                if m == n:
                    continue
                pairs.append({"src": m, "dst": n, "hops": list(self.hops[(m, n)]),
                              "e2e_success": float(self.e2e_success[m, n])})
        return {"K": self.K, "bits_per_element": self.bits_per_element, "pairs": pairs,
                "infeasible": [list(p) for p in self.infeasible]}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def error_free(self) -> "RoutePlan":
        """Same hops with every hop forced loss-free (all ``e2e_success`` equal 1)."""
        eps = {k: tuple(1.0 for _ in v) for k, v in self.hop_bit_success.items()}
        return RoutePlan(self.n_participants, self.K, self.bits_per_element, dict(self.hops), eps,
                         _success_matrix(self.n_participants, self.hops, eps, self.K, self.bits_per_element),
                         list(self.infeasible))

    def same_routes(self, other: "RoutePlan") -> bool:
        return (self.hops == other.hops
                and np.array_equal(self.e2e_success, other.e2e_success))


def _path_success(hop_eps: Sequence[float], elements: int, bits: int) -> float:
    prod = Fraction(1)
    for eps in hop_eps:
        prod *= Fraction(packet_success_rate(eps, elements, bits))
    return float(prod)


def _success_matrix(n: int, hops: Mapping, hop_eps: Mapping, elements: int, bits: int) -> np.ndarray:
    out = np.zeros((n, n))
    for m in range(n):
        for k in range(n):
            if m == k:
                out[m, k] = 1.0
            elif hops[(m, k)]:
                out[m, k] = _path_success(hop_eps[(m, k)], elements, bits)
    return out


def _make_plan(graph: NetworkGraph, K: int, paths: Mapping, infeasible=()) -> RoutePlan:
    n = graph.n_participants
    hops, hop_eps = {}, {}
    for m in range(n):
        for k in range(n):
            path = tuple(paths.get((m, k), ())) if m != k else ()
            hops[(m, k)] = path
            hop_eps[(m, k)] = tuple(graph.link(a, b).bit_success for a, b in zip(path, path[1:]))
    bits = graph.params.bits_per_element
    return RoutePlan(n, K, bits, hops, hop_eps, _success_matrix(n, hops, hop_eps, K, bits), list(infeasible))


def min_per_routes(graph: NetworkGraph, K: int) -> RoutePlan:
    """All-pairs minimum end-to-end PER routes by Floyd–Warshall.

    Edge weights are ``-log`` of the hop packet success; every node,
    relays included, may serve as an intermediate hop.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    N = graph.n_nodes
    bits = graph.params.bits_per_element
    dist: list[list[_Label | None]] = [[None] * N for _ in range(N)]
    for i in range(N):
        dist[i][i] = _self_label(i)
    for (m, n), lk in graph.links.items():
        s = packet_success_rate(lk.bit_success, K, bits)
        dist[m][n] = _hop_label(m, n, s)
        dist[n][m] = _hop_label(n, m, s)
    for k in range(N):
        row_k = dist[k]
        for i in range(N):
            d_ik = dist[i][k]
            if d_ik is None or i == k:
                continue
            row_i = dist[i]
            for j in range(N):
                if j == i or j == k:
                    continue
                d_kj = row_k[j]
                if d_kj is None:
                    continue
                cur = row_i[j]
                # cheap rejection before building the candidate
                if cur is not None and math.isfinite(cur.logp):
                    lp = d_ik.logp + d_kj.logp
                    if lp < cur.logp - 1e-9 * (1.0 + abs(lp) + abs(cur.logp)):
                        continue
                cand = _cat(d_ik, d_kj)
                if _better(cand, cur):
                    row_i[j] = cand
    paths = {}
    for m in graph.participants:
        for n in graph.participants:
            if m == n:
                continue
            if dist[m][n] is None:
                raise Unreachable(f"no route from {m} to {n}")
            paths[(m, n)] = dist[m][n].path
    return _make_plan(graph, K, paths)


def _simple_paths(graph: NetworkGraph, src: int, dst: int) -> Iterable[tuple[int, ...]]:
    stack = [(src, (src,))]
    while stack:
        node, path = stack.pop()
        if node == dst:
            yield path
            continue
        for nb in graph.neighbors(node):
            if nb not in path:
                stack.append((nb, path + (nb,)))


def enumerate_simple_paths(graph: NetworkGraph, src: int, dst: int) -> list[tuple[int, ...]]:
    return sorted(_simple_paths(graph, src, dst))


def _label_of(graph: NetworkGraph, path: Sequence[int], K: int) -> _Label:
    lab = _self_label(path[0])
    bits = graph.params.bits_per_element
    for a, b in zip(path, path[1:]):
        lab = _cat(lab, _hop_label(a, b, packet_success_rate(graph.link(a, b).bit_success, K, bits)))
    return lab


def brute_force_routes(graph: NetworkGraph, K: int) -> RoutePlan:
    """Exhaustive simple-path search; a test oracle for small graphs."""
    if graph.n_nodes > BRUTE_FORCE_MAX_NODES:
        raise SizeLimit(f"brute force limited to {BRUTE_FORCE_MAX_NODES} nodes")
    paths = {}
    for m in graph.participants:
        for n in graph.participants:
            if m == n:
                continue
            best = None
            for path in _simple_paths(graph, m, n):
                lab = _label_of(graph, path, K)
                if _better(lab, best):
                    best = lab
            if best is None:
                raise Unreachable(f"no route from {m} to {n}")
            paths[(m, n)] = best.path
    return _make_plan(graph, K, paths)


def _single_source(graph: NetworkGraph, src: int, K: int, can_transmit: Sequence[bool]) -> dict:
    """Best labels from ``src``; only nodes with ``can_transmit`` may forward."""
    bits = graph.params.bits_per_element
    best: dict[int, _Label] = {src: _self_label(src)}
    settled: set[int] = set()
    while True:
        cand = None
        for node, lab in best.items():
            if node not in settled and (cand is None or _better(lab, best[cand])):
                cand = node
        if cand is None:
            return best
        settled.add(cand)
        if not can_transmit[cand]:
            continue
        for nb in graph.neighbors(cand):
            if nb in settled:
                continue
            s = packet_success_rate(graph.link(cand, nb).bit_success, K, bits)
            lab = _cat(best[cand], _hop_label(cand, nb, s))
            if nb in lab.path[:-1]:
                continue
            if _better(lab, best.get(nb)):
                best[nb] = lab


def constrained_admission(
    graph: NetworkGraph,
    budgets: Mapping[int, int] | Sequence[int] | None,
    p: Sequence[float],
    K: int,
) -> RoutePlan:
    """Greedy admission of homologous route sets under per-node budgets.

    Sources are served in decreasing ``p`` (ties by id). A node spends one
    unit of budget per distinct payload it transmits, however many next hops
    it serves. Each source gets the best routes available through nodes with
    budget left. Pairs that cannot be served keep an empty route with zero
    success and are listed in ``plan.infeasible``.
    """
    N = graph.n_nodes
    n_part = graph.n_participants
    if len(p) != n_part:
        raise ValueError("one weight per participant required")
    residual = [math.inf] * N
    if budgets is not None:
        items = budgets.items() if isinstance(budgets, Mapping) else enumerate(budgets)
        for node, b in items:
            if b is None:
                continue
            if b < 0:
                raise ValueError("budgets must be nonnegative")
            residual[int(node)] = int(b)
    order = sorted(range(n_part), key=lambda m: (-p[m], m))
    paths, infeasible = {}, []
    for m in order:
        labels = _single_source(graph, m, K, [r >= 1 for r in residual])
        used = set()
        for n in range(n_part):
            if n == m:
                continue
            lab = labels.get(n)
            if lab is None:
                infeasible.append((m, n))
                continue
            paths[(m, n)] = lab.path
            used.update(lab.path[:-1])
        for v in used:
            residual[v] -= 1
    return _make_plan(graph, K, paths, infeasible)


def routing_objective(plan: RoutePlan | np.ndarray, p: Sequence[float]) -> float:
    """``sum_n sum_m (1 - rho[m, n]) (p_m^2 + p_m)``."""
    rho = plan.e2e_success if isinstance(plan, RoutePlan) else np.asarray(plan, dtype=float)
    p = np.asarray(p, dtype=float)
    total = 0.0
    for n in range(len(p)):
        for m in range(len(p)):
            if m != n:
                total += (1.0 - rho[m, n]) * (p[m] ** 2 + p[m])
    return total


# -- TDMA accounting ----------------------------------------------------------


@dataclass(frozen=True)
class Transmission:
    transmitter: int
    payload: int
    receivers: frozenset

    def nodes(self) -> frozenset:
        return self.receivers | {self.transmitter}


@dataclass
class SlotSchedule:
    transmissions: list
    slots: dict
    total_slots: int
    total_traffic_bits: float
    protocol: str = "raa"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["slot", "transmitter", "payload_source", "receivers"])
        for tx in sorted(self.transmissions, key=lambda t: (self.slots[t], t.transmitter, t.payload)):
            w.writerow([self.slots[tx], tx.transmitter, tx.payload, ";".join(map(str, sorted(tx.receivers)))])
        return buf.getvalue()


def _routed_transmissions(routes: Iterable[tuple[int, Sequence[int]]]) -> list[Transmission]:
    fwd: dict[tuple[int, int], set] = {}
    for payload, path in routes:
        for a, b in zip(path, path[1:]):
            fwd.setdefault((a, payload), set()).add(b)
    return [Transmission(a, payload, frozenset(rx)) for (a, payload), rx in sorted(fwd.items())]


def raa_transmissions(plan: RoutePlan) -> list[Transmission]:
    return _routed_transmissions((m, plan.hops[(m, n)]) for (m, n) in sorted(plan.hops) if m != n)


def cfl_transmissions(plan: RoutePlan, aggregator: int, include_downlink: bool = True) -> list[Transmission]:
    routes = [(n, plan.hops[(n, aggregator)]) for n in plan.participants if n != aggregator]
    up = _routed_transmissions(routes)
    if not include_downlink:
        return up
    down = _routed_transmissions((aggregator, plan.hops[(aggregator, n)])
                                 for n in plan.participants if n != aggregator)
    # the downlink payload is the global model; keep it distinct from uplink payloads
    down = [Transmission(t.transmitter, -1 - aggregator, t.receivers) for t in down]
    return up + down


def conflicts(a: Transmission, b: Transmission, graph: NetworkGraph) -> bool:
    """Shared endpoint (no simultaneous tx/rx) or neighbouring transmitters."""
    if a.nodes() & b.nodes():
        return True
    return graph.has_link(a.transmitter, b.transmitter)


def color_transmissions(transmissions: Sequence[Transmission], graph: NetworkGraph) -> dict:
    """Greedy conflict-graph colouring, highest conflict degree first."""
    txs = list(transmissions)
    nbrs = [[j for j in range(len(txs)) if j != i and conflicts(txs[i], txs[j], graph)] for i in range(len(txs))]
    order = sorted(range(len(txs)), key=lambda i: (-len(nbrs[i]), txs[i].transmitter, txs[i].payload))
    color: dict[int, int] = {}
    for i in order:
        taken = {color[j] for j in nbrs[i] if j in color}
        c = 0
        while c in taken:
            c += 1
        color[i] = c
    return {txs[i]: c for i, c in color.items()}


def schedule_routed(transmissions: Sequence[Transmission], graph: NetworkGraph, model_size_bits: float,
                    protocol: str) -> SlotSchedule:
    if model_size_bits <= 0:
        raise ValueError("model size must be positive")
    slots = color_transmissions(transmissions, graph)
    total = (max(slots.values()) + 1) if slots else 0
    return SlotSchedule(list(transmissions), slots, total, model_size_bits * len(transmissions), protocol)


def assign_slots(
    protocol: str,
    graph: NetworkGraph,
    model_size_bits: float,
    plan: RoutePlan | None = None,
    J: int = 1,
    aggregator: int | None = None,
    include_downlink: bool = True,
) -> SlotSchedule:
    """Per-round slot count and traffic for ``"raa"``, ``"aayg"`` or ``"cfl"``.

    AaYG uses the closed form ``J (d_max + 1)`` slots and ``J N`` model
    broadcasts; routed protocols colour the per-hop broadcast set.
    """
    if model_size_bits <= 0:
        raise ValueError("model size must be positive")
    if protocol == "aayg":
        if J < 1:
            raise ValueError("J must be at least 1")
        d_max = graph.participant_max_degree()
        n = graph.n_participants
        return SlotSchedule([], {}, J * (d_max + 1), J * n * model_size_bits, "aayg")
    if plan is None:
        raise ValueError(f"{protocol} accounting needs a route plan")
    if protocol == "raa":
        return schedule_routed(raa_transmissions(plan), graph, model_size_bits, "raa")
    if protocol == "cfl":
        if aggregator is None:
            raise ValueError("C-FL accounting needs an aggregator")
        return schedule_routed(cfl_transmissions(plan, aggregator, include_downlink), graph, model_size_bits, "cfl")
    raise ValueError(f"unknown protocol {protocol!r}")


def schedule_is_valid(schedule: SlotSchedule, graph: NetworkGraph) -> bool:
    by_slot: dict[int, list] = {}
    for tx, s in schedule.slots.items():
        by_slot.setdefault(s, []).append(tx)
    for group in by_slot.values():
        for i in range(len(group)):
            for j in range(i + 1, len(group)):
                if conflicts(group[i], group[j], graph):
                    return False
    return True
