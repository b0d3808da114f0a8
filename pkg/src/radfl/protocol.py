"""Synchronous D-FL rounds under segment-level packet loss.

Shapes used throughout: ``N`` participants, ``M`` parameters, ``L``
segments. A success tensor ``e`` has shape ``(N, N, L)`` with
``e[m, n, l] == 1`` when segment ``l`` of source ``m`` reached ``n``
intact. Coefficient tensors share that layout, and bias matrices are
stored per segment as ``lam[l, m, n] = p_m - coef[m, n, l]``.

Every sum over clients runs in ascending client id so that results are
reproducible bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .learning import Task, local_train, n_segments, segment_index, segment_lengths
from .netmodel import NetworkGraph, packet_success_rate
from .routing import RoutePlan

SEGMENT_DRAWS = "segment"
ELEMENT_DRAWS = "element"
COEFF_NORMALIZATION = "coeff"
MODEL_SUBSTITUTION = "substitution"
SCHEMES = (COEFF_NORMALIZATION, MODEL_SUBSTITUTION)


def _check_scheme(scheme: str) -> None:
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}, got {scheme!r}")


# -- loss sampling -----------------------------------------------------------

def segment_success_matrices(plan: RoutePlan, K: int, M: int) -> np.ndarray:
    """End-to-end success per segment, shape ``(N, N, L)``.

    The ragged last segment uses its own bit length.
    """
    lengths = segment_lengths(M, K)
    cache = {}
    out = np.empty((plan.n_participants, plan.n_participants, len(lengths)))
    for l, k in enumerate(lengths):
        if k not in cache:
            cache[k] = plan.success_matrix(int(k))
        out[:, :, l] = cache[k]
    return out


def _element_draws(per_element: np.ndarray, K: int, M: int, rng: np.random.Generator) -> np.ndarray:
    # A segment survives iff every element's uniform falls below the
    # per-element success rate: same law as one Bernoulli(rho**k) per segment,
    # but the uniforms do not depend on K, so K sweeps share their randomness.
    u = rng.random(per_element.shape + (M,))
    starts = np.arange(0, M, K)
    worst = np.maximum.reduceat(u, starts, axis=-1)
    return (worst < per_element[..., None]).astype(np.uint8)


def sample_successes(plan: RoutePlan, K: int, M: int, rng: np.random.Generator,
                     mode: str = SEGMENT_DRAWS) -> np.ndarray:
    """Independent Bernoulli draws per ``(m, n, l)``; the diagonal is always 1.

    ``mode="element"`` couples draws across packet lengths (see ``_element_draws``).
    """
    if mode == SEGMENT_DRAWS:
        rho = segment_success_matrices(plan, K, M)
        e = (rng.random(rho.shape) < rho).astype(np.uint8)
    elif mode == ELEMENT_DRAWS:
        e = _element_draws(plan.success_matrix(1), K, M, rng)
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    idx = np.arange(plan.n_participants)
    e[idx, idx, :] = 1
    return e


# -- aggregation -------------------------------------------------------------

def normalized_coefficients(p: Sequence[float], e: np.ndarray) -> np.ndarray:
    """``p_m e[m, n, l] / sum_m' p_m' e[m', n, l]``.

    ``e`` may carry extra leading batch axes, ``(..., N, N, L)``.
    """
    p = np.asarray(p, dtype=float)
    N = len(p)
    e = np.asarray(e)
    num = [p[m] * e[..., m, :, :] for m in range(N)]
    den = np.zeros(e.shape[:-3] + e.shape[-2:])
    for m in range(N):
        den = den + num[m]
    # the receiver always holds its own segment, so den >= p_n > 0
    assert np.all(den > 0), "degenerate normaliser"
    return np.stack([num[m] / den for m in range(N)], axis=-3)


def substitution_coefficients(p: Sequence[float], e: np.ndarray) -> np.ndarray:
    """Effective weights when lost segments are replaced by the receiver's own."""
    p = np.asarray(p, dtype=float)
    N = len(p)
    e = np.asarray(e, dtype=float)
    coef = p[:, None, None] * e
    lost = np.zeros(e.shape[1:])
    for m in range(N):
        lost = lost + p[m] * (1.0 - e[m])
    for n in range(N):
        coef[n, n, :] = p[n] + lost[n, :]
    return coef


def aggregation_coefficients(p, e, scheme: str = COEFF_NORMALIZATION) -> np.ndarray:
    _check_scheme(scheme)
    if scheme == COEFF_NORMALIZATION:
        return normalized_coefficients(p, e)
    return substitution_coefficients(p, e)


def apply_coefficients(models: np.ndarray, coef: np.ndarray, K: int) -> np.ndarray:
    """``w[n, j] = sum_m coef[m, n, seg(j)] * models[m, j]`` in ascending ``m``."""
    N, M = models.shape
    seg = segment_index(M, K)
    out = np.zeros((coef.shape[1], M))
    for m in range(N):
        out += coef[m][:, seg] * models[m][None, :]
    return out


def aggregate_raa(models: np.ndarray, p, e: np.ndarray, scheme: str, K: int) -> np.ndarray:
    """Local aggregation at every receiver from a success tensor.

    Coefficient normalisation renormalises the data weights over the
    segments that arrived. Model substitution swaps each lost segment for
    the receiver's own and keeps the fixed weights ``p``.
    """
    _check_scheme(scheme)
    models = np.asarray(models, dtype=float)
    if scheme == COEFF_NORMALIZATION:
        return apply_coefficients(models, normalized_coefficients(p, e), K)
    p = np.asarray(p, dtype=float)
    N, M = models.shape
    seg = segment_index(M, K)
    out = np.empty((e.shape[1], M))
    for n in range(e.shape[1]):
        acc = np.zeros(M)
        for m in range(N):
            ok = e[m, n][seg].astype(bool)
            acc = acc + p[m] * np.where(ok, models[m], models[n])
        out[n] = acc
    return out


def bias_matrices(p, coef: np.ndarray) -> np.ndarray:
    """``lam[l, m, n] = p_m - coef[m, n, l]``."""
    p = np.asarray(p, dtype=float)
    return np.moveaxis(p[:, None, None] - coef, 2, 0)


def spectral_norm_sq(mats: np.ndarray) -> np.ndarray:
    """Squared 2-norm of each matrix in a ``(..., N, N)`` stack."""
    sv = np.linalg.svd(mats, compute_uv=False)
    return sv[..., 0] ** 2


def weighted_average(models: np.ndarray, p) -> np.ndarray:
    acc = np.zeros(models.shape[1])
    for m in range(models.shape[0]):
        acc = acc + p[m] * models[m]
    return acc


# -- rounds ------------------------------------------------------------------

@dataclass
class ProtocolConfig:
    protocol: str  # "raa" | "aayg" | "cfl"
    scheme: str = COEFF_NORMALIZATION
    K: int = 1
    rounds: int = 10
    seed: int = 0
    J: int = 1
    aggregator: int | None = None
    epochs: int = 1
    lr: float = 0.1
    sampling: str = SEGMENT_DRAWS

    def __post_init__(self):
        _check_scheme(self.scheme)
        if self.sampling not in (SEGMENT_DRAWS, ELEMENT_DRAWS):
            raise ValueError(f"unknown sampling mode {self.sampling!r}")
        if self.protocol not in ("raa", "aayg", "cfl"):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.K < 1 or self.J < 1 or self.epochs < 1 or self.rounds < 0:
            raise ValueError("K, J and epochs must be at least 1")
        if self.protocol == "cfl" and self.aggregator is None:
            raise ValueError("C-FL needs an aggregator")

    @property
    def label(self) -> str:
        extra = f"-J{self.J}" if self.protocol == "aayg" else ""
        extra += f"-agg{self.aggregator}" if self.protocol == "cfl" else ""
        return f"{self.protocol}{extra}-{self.scheme}"


@dataclass
class TrainState:
    round: int
    models: np.ndarray  # (N, M) locally aggregated models w_n^{t-1}


@dataclass
class RoundOutcome:
    round: int
    trained: np.ndarray  # omega_{n,I}^t
    models: np.ndarray  # w_n^t
    omega_bar: np.ndarray
    successes: object  # (N, N, L) tensor, or a list of one-hop tensors for AaYG
    coefficients: np.ndarray  # effective (N, N, L)
    lambdas: np.ndarray  # (L, N, N)
    metrics: dict = field(default_factory=dict)


def _train_all(task: Task, models: np.ndarray, epochs: int, lr: float) -> np.ndarray:
    return np.stack([local_train(task, n, models[n], epochs, lr) for n in range(task.n_clients)])


def round_metrics(task: Task, outcome: RoundOutcome, w_star: np.ndarray | None = None,
                  with_accuracy: bool = False) -> dict:
    models = outcome.models
    per_client = [task.global_loss(w) for w in models]
    N = len(models)
    max_dist = 0.0
    for a in range(N):
        for b in range(a + 1, N):
            max_dist = max(max_dist, float(np.linalg.norm(models[a] - models[b])))
    out = {
        "per_client_loss": per_client,
        "mean_loss": float(np.mean(per_client)),
        "max_pairwise_distance": max_dist,
        "lambda_sq_mean": float(np.mean(spectral_norm_sq(outcome.lambdas))),
    }
    if with_accuracy and task.accuracy(models[0]) is not None:
        out["mean_accuracy"] = float(np.mean([task.accuracy(w) for w in models]))
    if w_star is not None:
        out["dist_to_opt"] = float(np.linalg.norm(outcome.omega_bar - w_star))
    return out


def run_round_raa(state: TrainState, task: Task, plan: RoutePlan, config: ProtocolConfig,
                  rng: np.random.Generator) -> RoundOutcome:
    trained = _train_all(task, state.models, config.epochs, config.lr)
    p = task.p
    omega_bar = weighted_average(trained, p)
    e = sample_successes(plan, config.K, task.dim, rng, config.sampling)
    models = aggregate_raa(trained, p, e, config.scheme, config.K)
    coef = aggregation_coefficients(p, e, config.scheme)
    return RoundOutcome(state.round + 1, trained, models, omega_bar, e, coef, bias_matrices(p, coef))


def one_hop_successes(graph: NetworkGraph, K: int, M: int, rng: np.random.Generator,
                      mode: str = SEGMENT_DRAWS) -> np.ndarray:
    """Single-hop segment success among participants; 0 where no link."""
    N = graph.n_participants
    bits = graph.params.bits_per_element
    idx = np.arange(N)
    if mode == ELEMENT_DRAWS:
        per = np.zeros((N, N))
        for (a, b), lk in graph.links.items():
            if a < N and b < N:
                per[a, b] = per[b, a] = packet_success_rate(lk.bit_success, 1, bits)
        per[idx, idx] = 1.0
        e = _element_draws(per, K, M, rng)
    else:
        lengths = segment_lengths(M, K)
        rho = np.zeros((N, N, len(lengths)))
        for (a, b), lk in graph.links.items():
            if a < N and b < N:
                for l, k in enumerate(lengths):
                    rho[a, b, l] = rho[b, a, l] = packet_success_rate(lk.bit_success, int(k), bits)
        rho[idx, idx, :] = 1.0
        e = (rng.random(rho.shape) < rho).astype(np.uint8)
    e[idx, idx, :] = 1
    return e


def _gossip_coefficients(p: np.ndarray, e: np.ndarray, adj: np.ndarray, scheme: str) -> np.ndarray:
    """One AaYG mixing step restricted to self plus one-hop neighbours."""
    N = len(p)
    mask = adj[:, :, None].astype(float)
    if scheme == COEFF_NORMALIZATION:
        return normalized_coefficients(p, e * mask)
    den = np.zeros(e.shape[1:])
    for m in range(N):
        den = den + p[m] * mask[m]
    coef = p[:, None, None] * mask * e / den[None]
    for n in range(N):
        lost = np.zeros(e.shape[2])
        for m in range(N):
            lost = lost + p[m] * mask[m, n] * (1.0 - e[m, n])
        coef[n, n, :] = (p[n] + lost) / den[n]
    return coef


def run_round_aayg(state: TrainState, task: Task, graph: NetworkGraph, J: int, scheme: str,
                   rng: np.random.Generator, K: int, epochs: int, lr: float,
                   sampling: str = SEGMENT_DRAWS) -> RoundOutcome:
    """Local training, then ``J`` broadcast-and-aggregate steps over one-hop links."""
    _check_scheme(scheme)
    trained = _train_all(task, state.models, epochs, lr)
    p = task.p
    N, M = trained.shape
    adj = np.eye(N, dtype=bool)
    for a, b in graph.links:
        if a < N and b < N:
            adj[a, b] = adj[b, a] = True
    L = n_segments(M, K)
    eff = np.broadcast_to(np.eye(N)[:, :, None], (N, N, L)).copy()
    current = trained
    draws = []
    for _ in range(J):
        e = one_hop_successes(graph, K, M, rng, sampling)
        draws.append(e)
        step = _gossip_coefficients(p, e, adj, scheme)
        current = apply_coefficients(current, step, K)
        eff = np.einsum("mkl,knl->mnl", eff, step)
    omega_bar = weighted_average(trained, p)
    return RoundOutcome(state.round + 1, trained, current, omega_bar, draws, eff, bias_matrices(p, eff))


def run_round_cfl(state: TrainState, task: Task, plan: RoutePlan, aggregator: int, scheme: str,
                  rng: np.random.Generator, K: int, epochs: int, lr: float,
                  sampling: str = SEGMENT_DRAWS) -> RoundOutcome:
    """Uplink to ``aggregator`` over routes, aggregate, lossy downlink.

    On the downlink a client keeps its own freshly trained segment wherever
    the global segment was lost.
    """
    _check_scheme(scheme)
    trained = _train_all(task, state.models, epochs, lr)
    p = task.p
    N, M = trained.shape
    e = sample_successes(plan, K, M, rng, sampling)
    seg = segment_index(M, K)
    up_coef = aggregation_coefficients(p, e, scheme)[:, aggregator, :]  # (N, L)
    global_model = apply_coefficients(trained, up_coef[:, None, :], K)[0]
    down = e[aggregator]  # (N, L): success of agg -> n
    models = np.where(down[:, seg].astype(bool), global_model[None, :], trained)
    coef = np.where(down[None, :, :].astype(bool), up_coef[:, None, :], np.eye(N)[:, :, None])
    omega_bar = weighted_average(trained, p)
    return RoundOutcome(state.round + 1, trained, models, omega_bar, e, coef, bias_matrices(p, coef))


def run_protocol(task: Task, config: ProtocolConfig, rng: np.random.Generator,
                 plan: RoutePlan | None = None, graph: NetworkGraph | None = None,
                 initial: np.ndarray | None = None, w_star: np.ndarray | None = None,
                 callback=None, schedule=None) -> list[RoundOutcome]:
    """Run ``config.rounds`` rounds from a common initial model.

    With a per-round ``schedule`` (see ``routing.assign_slots``) the metrics
    also carry cumulative traffic bits and slots.
    """
    w0 = task.initial_model() if initial is None else np.asarray(initial, dtype=float)
    state = TrainState(0, np.tile(w0, (task.n_clients, 1)))
    outcomes = []
    for _ in range(config.rounds):
        if config.protocol == "raa":
            out = run_round_raa(state, task, plan, config, rng)
        elif config.protocol == "aayg":
            out = run_round_aayg(state, task, graph, config.J, config.scheme, rng, config.K,
                                 config.epochs, config.lr, config.sampling)
        else:
            out = run_round_cfl(state, task, plan, config.aggregator, config.scheme, rng, config.K,
                                config.epochs, config.lr, config.sampling)
        out.metrics = round_metrics(task, out, w_star)
        if schedule is not None:
            out.metrics["cumulative_traffic_bits"] = out.round * schedule.total_traffic_bits
            out.metrics["cumulative_slots"] = out.round * schedule.total_slots
        if callback is not None:
            callback(out)
        outcomes.append(out)
        state = TrainState(out.round, out.models)
    return outcomes
