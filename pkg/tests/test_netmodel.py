import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from radfl.errors import ConnectivityFailure, DomainError, InvalidDensity
from radfl.netmodel import (REFERENCE_COORDINATES, ChannelParams, NetworkGraph, add_random_relays, bit_success_rate,
                            build_from_coordinates, build_random_geometric, packet_success_rate, reference_topology,
                            path_loss_db, q_function, snr_linear, target_link_count)


def test_path_loss_hand_values():
    assert path_loss_db(1.0, 2.5) == pytest.approx(40.3588, abs=5e-5)
    assert path_loss_db(1.0, 1.0) == pytest.approx(32.4, abs=1e-12)
    assert path_loss_db(0.1, 1.0) == pytest.approx(12.4, abs=1e-12)


def test_path_loss_mhz_adds_sixty_db():
    assert path_loss_db(2.0, 2.5, freq_unit="MHz") - path_loss_db(2.0, 2.5) == pytest.approx(60.0)


@pytest.mark.parametrize("d", [0.0, -1.0])
def test_path_loss_rejects_nonpositive_distance(d):
    with pytest.raises(DomainError):
        path_loss_db(d, 2.5)


def test_snr_dB_arithmetic():
    p = ChannelParams()
    floor = -174 + 10 * math.log10(30e6)
    assert p.noise_floor_dbm == pytest.approx(floor)
    assert snr_linear(p, 100.0) == pytest.approx(10 ** ((20 - 100 - floor) / 10), rel=1e-12)
    assert snr_linear(p, 100.0) == pytest.approx(83.74, abs=0.02)
    assert snr_linear(p, 20.0 - floor) == pytest.approx(1.0, rel=1e-12)
    assert snr_linear(p, math.inf) == 0.0


def test_bit_success_limits_and_quadrature():
    assert bit_success_rate(0.0) == 0.5
    assert bit_success_rate(1e6) == 1.0
    tail, _ = quad(lambda x: math.exp(-x * x / 2) / math.sqrt(2 * math.pi), math.sqrt(2), math.inf,
                   epsabs=1e-14)
    assert bit_success_rate(1.0) == pytest.approx(1 - tail, abs=1e-12)
    assert bit_success_rate(1.0) == pytest.approx(0.92135, abs=5e-6)
    assert bit_success_rate(3.0, "QPSK") == bit_success_rate(3.0, "BPSK")


def test_q_function_matches_mpmath():
    for x in (0.0, 0.5, 1.0, 2.5, 5.0):
        exact = float(0.5 * mpmath.erfc(mpmath.mpf(x) / mpmath.sqrt(2)))
        assert abs(float(q_function(x)) - exact) <= 1e-12


def test_packet_success_high_precision():
    exact = float(mpmath.power(mpmath.mpf("0.999"), 32))
    assert packet_success_rate(0.999, 1) == pytest.approx(exact, rel=1e-14)
    assert packet_success_rate(0.999, 1) == pytest.approx(0.96849, abs=1e-5)
    assert packet_success_rate(1.0, 17) == 1.0


@given(st.floats(0.99, 0.999999), st.integers(1, 64))
def test_packet_success_exponent_law_and_monotone(eps, K):
    one = packet_success_rate(eps, K)
    two = packet_success_rate(eps, 2 * K)
    assert two == pytest.approx(one * one, rel=1e-12)
    assert packet_success_rate(eps, K + 1) < one
    assert packet_success_rate(min(1.0, eps + 1e-4), K) > one


def test_reference_table_density_half_gives_22_links():
    g = reference_topology(0.5)
    assert g.n_participants == 10
    assert len(g.links) == 22 == target_link_count(10, 0.5)
    assert g.is_connected()


@pytest.mark.parametrize("n,links", [(2, 1), (4, 6)])
def test_complete_graph_small(n, links):
    g = build_random_geometric(n, 0, 1e6, 1.0, seed=3)
    assert len(g.links) == links
    assert g.participant_subgraph_complete()


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 9), st.floats(0.3, 1.0), st.integers(0, 2 ** 32 - 1))
def test_density_law_and_determinism(n, rho, seed):
    if target_link_count(n, rho) < n - 1:
        with pytest.raises(InvalidDensity):
            build_random_geometric(n, 0, 1e7, rho, seed)
        return
    try:
        g = build_random_geometric(n, 0, 1e7, rho, seed, max_attempts=50)
    except ConnectivityFailure:
        return
    assert len(g.links) == target_link_count(n, rho)
    h = build_random_geometric(n, 0, 1e7, rho, seed, max_attempts=50)
    assert g.structurally_equal(h)
    for (m, k), lk in g.links.items():
        assert 0 < lk.bit_success <= 1 and lk.path_loss_db >= 0
        assert g.packet_success(m, k, 4) == g.packet_success(k, m, 4)


def test_invalid_density_rejected():
    with pytest.raises(InvalidDensity):
        build_random_geometric(5, 0, 1e6, 0.0, 1)
    with pytest.raises(InvalidDensity):
        build_random_geometric(10, 0, 1e6, 0.1, 1)


def test_json_round_trip_is_exact():
    g = add_random_relays(REFERENCE_COORDINATES, 5, 0.5, seed=7)
    h = NetworkGraph.from_json(g.to_json())
    assert g.structurally_equal(h)
    assert [lk.bit_success for _, lk in sorted(g.links.items())] == \
           [lk.bit_success for _, lk in sorted(h.links.items())]


def test_relays_follow_participants_and_keep_participant_links():
    base = reference_topology(0.5)
    g = add_random_relays(REFERENCE_COORDINATES, 7, 0.5, seed=2)
    assert g.n_participants == 10 and len(g.relays) == 7
    part_links = {k for k in g.links if k[1] < 10}
    assert part_links == set(base.links)


def test_disconnected_coordinates_raise():
    # a tight triangle and a distant pair: the 4 shortest pairs never bridge them
    coords = [(0, 0), (1, 0), (0, 1), (1e6, 0), (1e6 + 1, 0)]
    with pytest.raises(ConnectivityFailure):
        build_from_coordinates(coords, 0.4)


def test_coincident_nodes_rejected():
    with pytest.raises(DomainError):
        build_from_coordinates([(0, 0), (0, 0)], 1.0)


def test_bit_success_vectorised_matches_scalar():
    p = ChannelParams()
    g = reference_topology(0.9)
    mat = g.bit_success_matrix()
    for (m, n), lk in g.links.items():
        assert mat[m, n] == mat[n, m] == bit_success_rate(snr_linear(p, lk.path_loss_db))
    assert np.all(np.diag(g.packet_success_matrix(8)) == 1.0)
