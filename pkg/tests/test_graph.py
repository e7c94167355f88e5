from collections import Counter

import networkx as nx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opfexact.graph import (
    DisconnectedGraphError,
    PowerGraph,
    connected_components,
    fundamental_cycles,
    spanning_tree,
)
from opfexact.netmodel import BUNDLED_CASES, is_radial, load_case


def _assert_tree(g, tree):
    assert len(tree.edges) == g.n - 1
    h = nx.MultiGraph()
    h.add_nodes_from(range(g.n))
    h.add_edges_from((g.edges[k][0], g.edges[k][1]) for k in tree.edges)
    assert nx.is_tree(h)


def _assert_closed(g, cycle):
    deg = Counter()
    for k, _ in cycle.edges:
        u, v, _ = g.edges[k]
        deg[u] += 1
        deg[v] += 1
    assert all(d % 2 == 0 for d in deg.values())
    assert cycle.vertices[0] == cycle.vertices[-1]
    # consecutive oriented edges chain head to tail
    walk = []
    for k, sign in cycle.edges:
        u, v, _ = g.edges[k]
        walk.append((u, v) if sign > 0 else (v, u))
    for (_, b), (a, _) in zip(walk, walk[1:] + walk[:1]):
        assert b == a


class TestSpanningTree:
    def test_two_bus(self, two_bus):
        g = PowerGraph.from_case(two_bus)
        assert spanning_tree(g).edges == {0}

    def test_case9(self, case9):
        g = PowerGraph.from_case(case9)
        tree = spanning_tree(g)
        _assert_tree(g, tree)
        assert tree.root == case9.slack_index and tree.parent[tree.root] == -1

    def test_path_graph(self):
        g = PowerGraph.from_edges(4, [(0, 1), (1, 2), (2, 3)])
        assert spanning_tree(g).edges == {0, 1, 2}

    def test_disconnected(self):
        g = PowerGraph.from_edges(5, [(0, 1), (2, 3)])
        with pytest.raises(DisconnectedGraphError) as err:
            spanning_tree(g)
        assert err.value.components == [[0, 1], [2, 3], [4]]
        assert connected_components(g) == [[0, 1], [2, 3], [4]]

    def test_invalid_edge(self):
        with pytest.raises(ValueError):
            PowerGraph.from_edges(2, [(0, 0)])


class TestCycles:
    def test_radial_case141(self):
        case = load_case("case141")
        g = PowerGraph.from_case(case)
        assert len(fundamental_cycles(g, spanning_tree(g))) == 0

    def test_case9_one_cycle(self, case9):
        g = PowerGraph.from_case(case9)
        basis = fundamental_cycles(g, spanning_tree(g))
        assert len(basis) == 1
        _assert_closed(g, basis.cycles[0])
        assert len(basis.cycles[0]) == 6  # the ring; generator transformers are spurs

    def test_triangle(self, triangle):
        g = PowerGraph.from_case(triangle)
        (cycle,) = fundamental_cycles(g, spanning_tree(g))
        assert len(cycle) == 3
        _assert_closed(g, cycle)

    def test_parallel_branches_make_two_edge_cycle(self):
        g = PowerGraph.from_edges(3, [(0, 1), (1, 2), (1, 0)])
        (cycle,) = fundamental_cycles(g, spanning_tree(g))
        assert len(cycle) == 2
        _assert_closed(g, cycle)

    @pytest.mark.parametrize("name", BUNDLED_CASES)
    def test_cyclomatic_number_and_radial_consistency(self, name):
        case = load_case(name)
        g = PowerGraph.from_case(case)
        basis = fundamental_cycles(g, spanning_tree(g))
        assert len(basis) == len(case.branches) - case.n + 1
        assert (len(basis) == 0) == is_radial(case)
        for c in basis:
            _assert_closed(g, c)

    @settings(max_examples=60, deadline=None)
    @given(st.data())
    def test_random_connected_graphs(self, data):
        n = data.draw(st.integers(2, 12))
        # random tree, then random extra edges (possibly parallel)
        pairs = [(data.draw(st.integers(0, i - 1)), i) for i in range(1, n)]
        extra = data.draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1))
                                   .filter(lambda e: e[0] != e[1]), max_size=10))
        g = PowerGraph.from_edges(n, pairs + extra, root=data.draw(st.integers(0, n - 1)))
        tree = spanning_tree(g)
        _assert_tree(g, tree)
        basis = fundamental_cycles(g, tree)
        assert len(basis) == len(extra)
        for c in basis:
            _assert_closed(g, c)
