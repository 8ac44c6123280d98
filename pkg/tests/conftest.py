import numpy as np
import pytest

from routetime.network import build_network, project_turns
from routetime.route_choice import ChoiceParams

# criterion id -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")


def tt_params(b_tt=-1.0, left=0.0, u_turn=-5.0):
    return ChoiceParams(np.array([b_tt, b_tt, 0.0, left, u_turn]))


def two_arc_net():
    """Two parallel arcs from node 0 to node 1."""
    return build_network([(0.0, 0.0), (100.0, 0.0)], [(0, 1), (0, 1)], [100.0, 100.0],
                         allow_parallel=True)


def diamond_net():
    """0 -> {1, 2} -> 3, one-way."""
    return build_network([(0, 0), (100, 100), (100, -100), (200, 0)],
                         [(0, 1), (0, 2), (1, 3), (2, 3)], [141.4, 141.4, 141.4, 141.4])


def chain_net(n=3):
    return build_network([(100.0 * k, 0.0) for k in range(n)],
                         [(k, k + 1) for k in range(n - 1)], [100.0] * (n - 1))


def dag_grid(rows=3, cols=3, spacing=100.0):
    """Grid restricted to east and north arcs, hence acyclic."""
    coords = [(c * spacing, r * spacing) for r in range(rows) for c in range(cols)]
    arcs = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                arcs.append((i, i + 1))
            if r + 1 < rows:
                arcs.append((i, i + cols))
    return build_network(coords, arcs, [spacing] * len(arcs))


def all_paths(net, o, d):
    """Brute-force arc paths of a DAG, independent of the library's enumeration."""
    out = []

    def walk(node, prefix):
        if node == d:
            out.append(list(prefix))
            return
        for a in net.outgoing(node):
            walk(int(net.head[a]), prefix + [int(a)])

    walk(o, [])
    return out


@pytest.fixture
def two_arc():
    net = two_arc_net()
    return net, project_turns(net)


@pytest.fixture
def diamond():
    net = diamond_net()
    return net, project_turns(net)


@pytest.fixture
def chain():
    net = chain_net()
    return net, project_turns(net)


@pytest.fixture
def dag3():
    net = dag_grid()
    return net, project_turns(net)
