import itertools

import numpy as np
import pytest

from radfl.netmodel import graph_from_edges

# a small alphabet of link qualities makes equal-product ties common
EPS_ALPHABET = (0.9990, 0.9995, 0.9998, 0.99995, 1.0)


def random_small_graph(seed: int, n_nodes: int, extra: float = 0.4, n_participants=None):
    """Connected graph: random spanning tree plus each remaining pair with prob ``extra``."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_nodes)
    edges = {}
    for i in range(1, n_nodes):
        a, b = int(order[i]), int(order[rng.integers(0, i)])
        edges[tuple(sorted((a, b)))] = float(rng.choice(EPS_ALPHABET))
    for a, b in itertools.combinations(range(n_nodes), 2):
        if (a, b) not in edges and rng.random() < extra:
            edges[(a, b)] = float(rng.choice(EPS_ALPHABET))
    return graph_from_edges(n_nodes, edges, n_participants=n_participants)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict = {}


@pytest.fixture
def criterion():
    """Record ``(number, ok, detail)`` for the acceptance summary, then assert."""
    def record(number: int, ok: bool, detail: str):
        if number in ACCEPTANCE:  # parametrised criteria report every case
            prev_ok, prev = ACCEPTANCE[number]
            ACCEPTANCE[number] = (prev_ok and bool(ok), f"{prev}; {detail}")
        else:
            ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
