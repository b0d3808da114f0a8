"""Network topologies and the per-link channel chain.

Geometry is turned into link quality as

    distance -> path loss (dB) -> SNR -> bit success rate -> packet success rate

with the bit error rate of BPSK/QPSK given by ``Q(sqrt(2 * snr))``.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.special import erfc

from .errors import ConnectivityFailure, DomainError, InvalidDensity

PARTICIPANT = "participant"
RELAY = "relay"

# Client coordinates (m) of the 10-node evaluation network, ids 0..9.
REFERENCE_COORDINATES: tuple[tuple[float, float], ...] = (
    (2196.0, 1351.0),
    (3637.0, 3127.0),
    (2642.0, 284.0),
    (2884.0, 848.0),
    (5254.0, 596.0),
    (1730.0, 1923.0),
    (3572.0, 2668.0),
    (4546.0, 5326.0),
    (4328.0, 4001.0),
    (2534.0, 5171.0),
)

_FREQ_SCALE = {"GHz": 1.0, "MHz": 1e3}


@dataclass(frozen=True)
class ChannelParams:
    """Radio parameters shared by every link.

    ``freq_unit`` selects the unit in which the carrier enters the
    ``20 log10(f_c)`` path-loss term. ``"MHz"`` turns the formula into
    standard free-space loss; with ``"GHz"`` the evaluation network is
    error-free at every distance it contains.
    """

    carrier_ghz: float = 2.5
    bandwidth_hz: float = 30e6
    tx_power_dbm: float = 20.0
    noise_psd_dbm_hz: float = -174.0
    modulation: str = "BPSK"
    bits_per_element: int = 32
    freq_unit: str = "MHz"

    def __post_init__(self):
        if self.bits_per_element <= 0:
            raise DomainError("bits_per_element must be positive")
        if self.modulation not in ("BPSK", "QPSK"):
            raise DomainError(f"unsupported modulation {self.modulation!r}")
        if self.freq_unit not in _FREQ_SCALE:
            raise DomainError(f"freq_unit must be one of {sorted(_FREQ_SCALE)}")
        if self.bandwidth_hz <= 0 or self.carrier_ghz <= 0:
            raise DomainError("carrier and bandwidth must be positive")

    @property
    def noise_floor_dbm(self) -> float:
        return self.noise_psd_dbm_hz + 10.0 * math.log10(self.bandwidth_hz)

    def to_dict(self) -> dict:
        return {
            "carrier_ghz": self.carrier_ghz,
            "bandwidth_hz": self.bandwidth_hz,
            "tx_power_dbm": self.tx_power_dbm,
            "noise_psd_dbm_hz": self.noise_psd_dbm_hz,
            "modulation": self.modulation,
            "bits_per_element": self.bits_per_element,
            "freq_unit": self.freq_unit,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelParams":
        return cls(**d)


def path_loss_db(distance_km: float, carrier_ghz: float, *, freq_unit: str = "GHz") -> float:
    """``20 log10(f_c) + 20 log10(d) + 32.4`` with ``d`` in km."""
    if not distance_km > 0:
        raise DomainError(f"distance must be positive, got {distance_km!r}")
    if not carrier_ghz > 0:
        raise DomainError(f"carrier must be positive, got {carrier_ghz!r}")
    f = carrier_ghz * _FREQ_SCALE[freq_unit]
    return 20.0 * math.log10(f) + 20.0 * math.log10(distance_km) + 32.4


def snr_linear(params: ChannelParams, loss_db: float) -> float:
    if math.isinf(loss_db) and loss_db > 0:
        return 0.0
    if not math.isfinite(loss_db):
        raise DomainError("path loss must be finite or +inf")
    return 10.0 ** ((params.tx_power_dbm - loss_db - params.noise_floor_dbm) / 10.0)


def q_function(x):
    """Gaussian tail probability, ``0.5 * erfc(x / sqrt(2))``."""
    return 0.5 * erfc(np.asarray(x, dtype=float) / math.sqrt(2.0))


def bit_success_rate(snr: float, modulation: str = "BPSK") -> float:
    """``1 - Q(sqrt(2 snr))``; BPSK and QPSK share the expression."""
    if snr < 0:
        raise DomainError("snr must be nonnegative")
    if modulation not in ("BPSK", "QPSK"):
        raise DomainError(f"unsupported modulation {modulation!r}")
    # Q(sqrt(2g)) == 0.5 erfc(sqrt(g))
    return float(1.0 - 0.5 * erfc(math.sqrt(snr)))


def packet_success_rate(bit_success: float, elements_per_packet: int, bits_per_element: int = 32) -> float:
    if not 0.0 < bit_success <= 1.0:
        raise DomainError("bit success must lie in (0, 1]")
    if elements_per_packet < 1:
        raise DomainError("a packet holds at least one element")
    return bit_success ** (bits_per_element * elements_per_packet)


@dataclass(frozen=True)
class Node:
    id: int
    x: float
    y: float
    kind: str = PARTICIPANT

    @property
    def coords(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class Link:
    m: int
    n: int
    distance_m: float
    path_loss_db: float
    snr_linear: float
    bit_success: float

    @property
    def key(self) -> tuple[int, int]:
        return (min(self.m, self.n), max(self.m, self.n))


def make_link(a: Node, b: Node, params: ChannelParams) -> Link:
    d = math.hypot(a.x - b.x, a.y - b.y)
    if d <= 0:
        raise DomainError(f"nodes {a.id} and {b.id} coincide")
    loss = path_loss_db(d / 1000.0, params.carrier_ghz, freq_unit=params.freq_unit)
    snr = snr_linear(params, loss)
    eps = bit_success_rate(snr, params.modulation)
    m, n = sorted((a.id, b.id))
    return Link(m, n, d, loss, snr, eps)


@dataclass(frozen=True)
class NetworkGraph:
    nodes: tuple[Node, ...]
    links: dict = field(hash=False)
    params: ChannelParams = ChannelParams()
    edge_density: float = 1.0

    def __post_init__(self):
        ids = [nd.id for nd in self.nodes]
        if ids != list(range(len(ids))):
            raise DomainError("node ids must be contiguous from 0")
        n_part = sum(nd.kind == PARTICIPANT for nd in self.nodes)
        if n_part < 2:
            raise DomainError("at least two participants are required")
        if any(nd.kind == PARTICIPANT for nd in self.nodes[n_part:]):
            raise DomainError("participants must precede relays in id order")
        for nd in self.nodes:
            if not (math.isfinite(nd.x) and math.isfinite(nd.y)):
                raise DomainError(f"node {nd.id} has non-finite coordinates")
        for (m, n), lk in self.links.items():
            if m >= n or (lk.m, lk.n) != (m, n):
                raise DomainError(f"malformed link key {(m, n)}")
            if not 0.0 < lk.bit_success <= 1.0:
                raise DomainError(f"link {(m, n)} bit success outside (0, 1]")
        if not self.is_connected():
            raise ConnectivityFailure("network graph is not connected")
        adj: list[list[int]] = [[] for _ in self.nodes]
        for m, n in sorted(self.links):
            adj[m].append(n)
            adj[n].append(m)
        object.__setattr__(self, "_adj", tuple(tuple(sorted(a)) for a in adj))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_participants(self) -> int:
        return sum(nd.kind == PARTICIPANT for nd in self.nodes)

    @property
    def participants(self) -> list[int]:
        return [nd.id for nd in self.nodes if nd.kind == PARTICIPANT]

    @property
    def relays(self) -> list[int]:
        return [nd.id for nd in self.nodes if nd.kind == RELAY]

    def neighbors(self, i: int) -> tuple[int, ...]:
        return self._adj[i]

    def degree(self, i: int) -> int:
        return len(self._adj[i])

    def has_link(self, m: int, n: int) -> bool:
        return (min(m, n), max(m, n)) in self.links

    def link(self, m: int, n: int) -> Link:
        return self.links[(min(m, n), max(m, n))]

    def is_connected(self) -> bool:
        n = len(self.nodes)
        if n == 0:
            return False
        if not self.links:
            return n == 1
        rows, cols = zip(*self.links.keys())
        mat = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        k, _ = connected_components(mat, directed=False)
        return k == 1

    def participant_max_degree(self) -> int:
        """Largest number of participant neighbours of any participant."""
        part = set(self.participants)
        return max(sum(1 for j in self._adj[i] if j in part) for i in part)

    def bit_success_matrix(self) -> np.ndarray:
        out = np.zeros((self.n_nodes, self.n_nodes))
        for (m, n), lk in self.links.items():
            out[m, n] = out[n, m] = lk.bit_success
        return out

    def packet_success(self, m: int, n: int, elements: int) -> float:
        return packet_success_rate(self.link(m, n).bit_success, elements, self.params.bits_per_element)

    def packet_success_matrix(self, elements: int) -> np.ndarray:
        """Single-hop packet success; 0 where no link exists, 1 on the diagonal."""
        out = np.zeros((self.n_nodes, self.n_nodes))
        for (m, n), lk in self.links.items():
            out[m, n] = out[n, m] = packet_success_rate(lk.bit_success, elements, self.params.bits_per_element)
        np.fill_diagonal(out, 1.0)
        return out

    def participant_subgraph_complete(self) -> bool:
        part = self.participants
        return all(self.has_link(a, b) for a, b in itertools.combinations(part, 2))

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "nodes": [{"id": nd.id, "x_m": nd.x, "y_m": nd.y, "kind": nd.kind} for nd in self.nodes],
            "links": [{"m": m, "n": n, "bit_success": lk.bit_success} for (m, n), lk in sorted(self.links.items())],
            "channel": self.params.to_dict(),
            "edge_density": self.edge_density,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkGraph":
        params = ChannelParams.from_dict(d.get("channel", {}))
        nodes = tuple(Node(int(nd["id"]), float(nd["x_m"]), float(nd["y_m"]), nd.get("kind", PARTICIPANT))
                      for nd in d["nodes"])
        links = {}
        for item in d["links"]:
            m, n = sorted((int(item["m"]), int(item["n"])))
            derived = make_link(nodes[m], nodes[n], params)
            # bit_success in the document is authoritative
            links[(m, n)] = Link(m, n, derived.distance_m, derived.path_loss_db, derived.snr_linear,
                                 float(item["bit_success"]))
        return cls(nodes, links, params, float(d.get("edge_density", 1.0)))

    @classmethod
    def from_json(cls, text: str) -> "NetworkGraph":
        return cls.from_dict(json.loads(text))

    def structurally_equal(self, other: "NetworkGraph") -> bool:
        return (self.nodes == other.nodes and self.params == other.params
                and self.edge_density == other.edge_density
                and sorted(self.links.items()) == sorted(other.links.items()))


def target_link_count(n_participants: int, edge_density: float) -> int:
    # Python's round(): 0.5 * 45 -> 22
    return int(round(edge_density * n_participants * (n_participants - 1) / 2))


def _closest_pairs(coords: np.ndarray, count: int) -> list[tuple[int, int]]:
    pairs = itertools.combinations(range(len(coords)), 2)
    keyed = sorted(pairs, key=lambda p: (float(np.hypot(*(coords[p[0]] - coords[p[1]]))), p))
    return keyed[:count]


def build_from_coordinates(
    participant_coords: Sequence[tuple[float, float]],
    edge_density: float,
    params: ChannelParams | None = None,
    relay_coords: Sequence[tuple[float, float]] = (),
    relay_radius_m: float | None = None,
) -> NetworkGraph:
    """Deterministic topology over fixed coordinates.

    Participants are joined along the ``round(rho * N(N-1)/2)`` shortest
    pairwise distances. A relay links to every node within
    ``relay_radius_m``, which defaults to the longest participant link.
    """
    params = params or ChannelParams()
    if not 0.0 < edge_density <= 1.0:
        raise InvalidDensity(f"edge density must lie in (0, 1], got {edge_density}")
    n = len(participant_coords)
    if n < 2:
        raise DomainError("at least two participants are required")
    count = target_link_count(n, edge_density)
    if count < n - 1:
        raise InvalidDensity(f"{count} links cannot connect {n} participants")
    pc = np.asarray(participant_coords, dtype=float).reshape(n, 2)
    nodes = [Node(i, float(x), float(y), PARTICIPANT) for i, (x, y) in enumerate(pc)]
    nodes += [Node(n + r, float(x), float(y), RELAY) for r, (x, y) in enumerate(relay_coords)]
    links = {}
    for m, k in _closest_pairs(pc, count):
        links[(m, k)] = make_link(nodes[m], nodes[k], params)
    if relay_coords:
        radius = relay_radius_m
        if radius is None:
            radius = max(lk.distance_m for lk in links.values())
        for r in range(n, len(nodes)):
            for j in range(r):
                d = math.hypot(nodes[r].x - nodes[j].x, nodes[r].y - nodes[j].y)
                if d <= radius:
                    links[(j, r)] = make_link(nodes[j], nodes[r], params)
    return NetworkGraph(tuple(nodes), links, params, edge_density)


def _sub_seeds(seed: int, attempts: int) -> Iterable[np.random.Generator]:
    for child in np.random.SeedSequence(seed).spawn(attempts):
        yield np.random.default_rng(child)


def _area_box(area) -> tuple[float, float]:
    if isinstance(area, (tuple, list)):
        w, h = float(area[0]), float(area[1])
    else:
        w = h = math.sqrt(float(area))
    if not (w > 0 and h > 0):
        raise DomainError("area must be positive")
    return w, h


def build_random_geometric(
    n_participants: int,
    n_relays: int,
    area,
    edge_density: float,
    seed: int,
    params: ChannelParams | None = None,
    max_attempts: int = 200,
) -> NetworkGraph:
    """Random coordinates in ``area`` (m², or a ``(width, height)`` box).

    Retries on derived sub-seeds until the graph is connected.
    """
    if not 0.0 < edge_density <= 1.0:
        raise InvalidDensity(f"edge density must lie in (0, 1], got {edge_density}")
    if target_link_count(n_participants, edge_density) < n_participants - 1:
        raise InvalidDensity("edge density too low to connect the participants")
    w, h = _area_box(area)
    for rng in _sub_seeds(seed, max_attempts):
        pc = rng.uniform((0.0, 0.0), (w, h), size=(n_participants, 2))
        rc = rng.uniform((0.0, 0.0), (w, h), size=(n_relays, 2))
        try:
            return build_from_coordinates([tuple(c) for c in pc], edge_density, params, [tuple(c) for c in rc])
        except ConnectivityFailure:
            continue
    raise ConnectivityFailure(f"no connected topology in {max_attempts} attempts (seed={seed})")


def add_random_relays(
    participant_coords: Sequence[tuple[float, float]],
    n_relays: int,
    edge_density: float,
    seed: int,
    params: ChannelParams | None = None,
    box: tuple[float, float] | None = None,
    max_attempts: int = 200,
) -> NetworkGraph:
    """Fixed participants plus ``n_relays`` routing-only nodes placed uniformly in ``box``."""
    pc = np.asarray(participant_coords, dtype=float)
    if box is None:
        box = (float(pc[:, 0].max()), float(pc[:, 1].max()))
    if n_relays == 0:
        return build_from_coordinates(participant_coords, edge_density, params)
    for rng in _sub_seeds(seed, max_attempts):
        rc = rng.uniform((0.0, 0.0), box, size=(n_relays, 2))
        try:
            return build_from_coordinates(participant_coords, edge_density, params, [tuple(c) for c in rc])
        except ConnectivityFailure:
            continue
    raise ConnectivityFailure(f"no connected relay placement in {max_attempts} attempts (seed={seed})")


def reference_topology(edge_density: float = 0.5, params: ChannelParams | None = None, scale: float = 1.0) -> NetworkGraph:
    coords = [(x * scale, y * scale) for x, y in REFERENCE_COORDINATES]
    return build_from_coordinates(coords, edge_density, params)


def line_graph(bit_success: Sequence[float], params: ChannelParams | None = None, spacing_m: float = 1000.0) -> NetworkGraph:
    """Path graph 0-1-...-k with the given per-link bit success rates (test helper)."""
    return graph_from_edges(len(bit_success) + 1,
                            {(i, i + 1): e for i, e in enumerate(bit_success)},
                            params=params, spacing_m=spacing_m)


def graph_from_edges(
    n_nodes: int,
    bit_success: dict,
    n_participants: int | None = None,
    params: ChannelParams | None = None,
    spacing_m: float = 1000.0,
) -> NetworkGraph:
    """Graph with explicit per-link bit success; nodes laid out on a circle."""
    params = params or ChannelParams()
    n_participants = n_nodes if n_participants is None else n_participants
    nodes = []
    for i in range(n_nodes):
        ang = 2 * math.pi * i / n_nodes
        nodes.append(Node(i, spacing_m * math.cos(ang), spacing_m * math.sin(ang),
                          PARTICIPANT if i < n_participants else RELAY))
    links = {}
    for (a, b), eps in bit_success.items():
        m, n = sorted((a, b))
        base = make_link(nodes[m], nodes[n], params)
        links[(m, n)] = Link(m, n, base.distance_m, base.path_loss_db, base.snr_linear, float(eps))
    return NetworkGraph(tuple(nodes), links, params, 1.0)
