import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_small_graph
from radfl.learning import QuadraticTask, local_train, make_quadratic_task, segment_index
from radfl.netmodel import graph_from_edges, line_graph
from radfl.protocol import (ELEMENT_DRAWS, SEGMENT_DRAWS, ProtocolConfig, TrainState, aggregate_raa,
                            aggregation_coefficients, apply_coefficients, bias_matrices,
                            normalized_coefficients, run_protocol, run_round_aayg, run_round_cfl,
                            sample_successes, substitution_coefficients)
from radfl.routing import assign_slots, min_per_routes


def straight_line_aggregate(models, p, e, K, scheme):
    """Per-element loop with no vectorisation, used as an oracle."""
    N, M = models.shape
    out = np.zeros((N, M))
    for n in range(N):
        for j in range(M):
            l = j // K
            if scheme == "coeff":
                den = sum(p[m] * e[m, n, l] for m in range(N))
                out[n, j] = sum(p[m] * e[m, n, l] * models[m, j] for m in range(N)) / den
            else:
                out[n, j] = sum(p[m] * (models[m, j] if e[m, n, l] else models[n, j]) for m in range(N))
    return out


def random_tensor(rng, N, L, keep=0.6):
    e = (rng.random((N, N, L)) < keep).astype(np.uint8)
    e[np.arange(N), np.arange(N), :] = 1
    return e


def test_sampling_extremes():
    rng = np.random.default_rng(0)
    g = graph_from_edges(3, {(0, 1): 1.0, (1, 2): 1.0})
    e = sample_successes(min_per_routes(g, 2), 2, 7, rng)
    assert e.shape == (3, 3, 4) and np.all(e == 1)
    dead = graph_from_edges(3, {(0, 1): 0.5 ** 40, (1, 2): 0.5 ** 40, (0, 2): 0.5 ** 40})
    e = sample_successes(min_per_routes(dead, 2), 2, 7, rng)
    assert np.array_equal(e, np.broadcast_to(np.eye(3, dtype=np.uint8)[:, :, None], e.shape))


@pytest.mark.parametrize("mode", [SEGMENT_DRAWS, ELEMENT_DRAWS])
def test_sampling_empirical_rate(mode):
    eps = 0.7 ** (1 / 32)
    g = graph_from_edges(2, {(0, 1): eps})
    plan = min_per_routes(g, 1)
    rng = np.random.default_rng(5)
    e = sample_successes(plan, 1, 20000, rng, mode)
    rate = e[0, 1].mean()
    se = np.sqrt(0.7 * 0.3 / e.shape[2])
    assert abs(rate - 0.7) <= 3 * se
    assert np.all(e[0, 0] == 1)


def test_three_client_coefficients_hand_value():
    e = np.ones((3, 3, 1), dtype=np.uint8)
    e[1, 0, 0] = 0
    coef = normalized_coefficients([1 / 3] * 3, e)
    assert np.allclose(coef[:, 0, 0], [0.5, 0.0, 0.5], atol=1e-15)
    sub = substitution_coefficients([1 / 3] * 3, e)
    assert np.allclose(sub[:, 0, 0], [2 / 3, 0.0, 1 / 3], atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(2, 6), st.integers(1, 5), st.sampled_from(["coeff", "substitution"]))
def test_aggregation_matches_straight_line_oracle(seed, N, K, scheme):
    rng = np.random.default_rng(seed)
    M = int(rng.integers(1, 12))
    L = -(-M // K)
    p = rng.dirichlet(np.ones(N))
    e = random_tensor(rng, N, L)
    models = rng.normal(size=(N, M))
    ours = aggregate_raa(models, p, e, scheme, K)
    assert np.allclose(ours, straight_line_aggregate(models, p, e, K, scheme), rtol=0, atol=1e-13)
    # the coefficient form gives the same models for either scheme
    via_coef = apply_coefficients(models, aggregation_coefficients(p, e, scheme), K)
    assert np.allclose(via_coef, ours, rtol=0, atol=1e-13)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(2, 8), st.sampled_from(["coeff", "substitution"]))
def test_coefficients_sum_to_one_and_bias_reconstructs(seed, N, scheme):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(N))
    e = random_tensor(rng, N, 3, keep=rng.random())
    coef = aggregation_coefficients(p, e, scheme)
    assert np.all(np.abs(coef.sum(axis=0) - 1) <= 1e-15 * N)
    assert np.all(coef >= 0)
    lam = bias_matrices(p, coef)
    models = rng.normal(size=(N, 6))
    K = 2
    seg = segment_index(6, K)
    w = apply_coefficients(models, coef, K)
    omega_bar = p @ models
    # w_n = omega_bar - sum_m lam[m, n] omega_m, element by element
    recon = omega_bar[None, :] - np.einsum("jmn,mj->nj", lam[seg], models)
    assert np.allclose(w, recon, atol=1e-12)


def test_lossless_tensor_gives_exact_average():
    p = np.array([0.1, 0.2, 0.3, 0.4])
    e = np.ones((4, 4, 2), dtype=np.uint8)
    for scheme in ("coeff", "substitution"):
        coef = aggregation_coefficients(p, e, scheme)
        assert np.array_equal(coef, np.broadcast_to(p[:, None, None], coef.shape))


def _small_setup(seed=0, N=4, M=9):
    g = random_small_graph(seed, N)
    task = make_quadratic_task(N, M, seed=seed)
    return g, task


@pytest.mark.parametrize("protocol", ["raa", "aayg", "cfl"])
def test_runs_are_deterministic(protocol):
    g, task = _small_setup()
    cfg = ProtocolConfig(protocol, K=3, rounds=4, aggregator=0 if protocol == "cfl" else None, lr=0.05)
    plan = min_per_routes(g, 3)
    a = run_protocol(task, cfg, np.random.default_rng(7), plan=plan, graph=g)
    b = run_protocol(task, cfg, np.random.default_rng(7), plan=plan, graph=g)
    assert all(np.array_equal(x.models, y.models) for x, y in zip(a, b))


def test_aayg_single_step_on_path_graph():
    # path 0-1-2 with lossless links: one gossip step mixes only neighbours
    g = line_graph([1.0, 1.0])
    p = np.array([0.2, 0.3, 0.5])
    task = QuadraticTask([np.ones(2)] * 3, [np.zeros(2)] * 3, p)
    models = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
    lr = 1e-300  # training is a no-op at this scale
    out = run_round_aayg(TrainState(0, models), task, g, 1, "coeff", np.random.default_rng(0), 1, 1, lr)
    expect = np.array([(0.2 * models[0] + 0.3 * models[1]) / 0.5,
                       0.2 * models[0] + 0.3 * models[1] + 0.5 * models[2],
                       (0.3 * models[1] + 0.5 * models[2]) / 0.8])
    assert np.allclose(out.models, expect, atol=1e-14)
    two = run_round_aayg(TrainState(0, models), task, g, 2, "coeff", np.random.default_rng(0), 1, 1, lr)
    W = np.array([[0.2 / 0.5, 0.2, 0.0], [0.3 / 0.5, 0.3, 0.3 / 0.8], [0.0, 0.5, 0.5 / 0.8]])
    assert np.allclose(two.models, (W @ W).T @ models, atol=1e-14)
    assert np.allclose(two.coefficients[:, :, 0], W @ W, atol=1e-14)


def test_cfl_lost_downlink_keeps_own_model():
    g = graph_from_edges(3, {(0, 1): 1.0, (0, 2): 0.5 ** 40})
    p = np.array([0.2, 0.3, 0.5])
    task = QuadraticTask([np.ones(2)] * 3, [np.zeros(2)] * 3, p)
    models = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
    plan = min_per_routes(g, 1)
    out = run_round_cfl(TrainState(0, models), task, plan, 0, "coeff", np.random.default_rng(1), 1, 1, 1e-300)
    global_model = (0.2 * models[0] + 0.3 * models[1]) / 0.5  # uplink renormalised without client 2
    assert np.allclose(out.models[0], global_model, atol=1e-14)
    assert np.allclose(out.models[1], global_model, atol=1e-14)
    assert np.array_equal(out.models[2], out.trained[2])
    assert np.allclose(out.coefficients.sum(axis=0), 1.0, atol=1e-15)


@pytest.mark.parametrize("protocol,scheme", list(itertools.product(["raa", "aayg", "cfl"],
                                                                   ["coeff", "substitution"])))
def test_error_free_rounds_agree_with_fedavg(protocol, scheme):
    # complete lossless graph: every protocol is plain FedAvg with one gossip step
    N, M = 4, 6
    g = graph_from_edges(N, {e: 1.0 for e in itertools.combinations(range(N), 2)})
    task = make_quadratic_task(N, M, seed=2)
    cfg = ProtocolConfig(protocol, scheme, K=2, rounds=20, aggregator=1 if protocol == "cfl" else None, lr=0.1)
    outs = run_protocol(task, cfg, np.random.default_rng(0), plan=min_per_routes(g, 2), graph=g)
    w = task.initial_model()
    for o in outs:
        trained = np.stack([local_train(task, n, w, 1, 0.1) for n in range(N)])
        w = task.p @ trained
        assert np.allclose(o.models, w[None, :], atol=1e-12)
        assert o.metrics["max_pairwise_distance"] <= 1e-12


def test_cumulative_schedule_metrics():
    g, task = _small_setup(3)
    plan = min_per_routes(g, 1)
    sched = assign_slots("raa", g, 64.0 * task.dim, plan)
    outs = run_protocol(task, ProtocolConfig("raa", rounds=3), np.random.default_rng(0), plan=plan,
                        schedule=sched, w_star=task.optimum())
    assert [o.metrics["cumulative_slots"] for o in outs] == [sched.total_slots * r for r in (1, 2, 3)]
    assert outs[-1].metrics["cumulative_traffic_bits"] == 3 * sched.total_traffic_bits
    assert "dist_to_opt" in outs[0].metrics


def test_config_validation():
    with pytest.raises(ValueError):
        ProtocolConfig("cfl")
    with pytest.raises(ValueError):
        ProtocolConfig("raa", scheme="median")
    with pytest.raises(ValueError):
        ProtocolConfig("raa", K=0)
    assert ProtocolConfig("aayg", J=5).label == "aayg-J5-coeff"
