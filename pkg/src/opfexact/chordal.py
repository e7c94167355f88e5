"""Chordal sparsity helpers: clique trees of a chordal extension and
maximum-determinant completion of partial Hermitian matrices.

A Hermitian matrix whose specified entries follow a chordal pattern has a PSD
completion iff every maximal-clique principal block is PSD, which is what makes
a large PSD constraint separable into clique blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import networkx as nx
import numpy as np

__all__ = ["CliqueTree", "clique_tree", "maxdet_completion"]


@dataclass(frozen=True)
class CliqueTree:
    """Maximal cliques of a chordal extension in a running-intersection order.

    ``parent[k]`` is the index of an earlier clique (``-1`` for the root), and
    ``cliques[k] & cliques[parent[k]]`` separates clique ``k`` from everything
    ordered before it.
    """

    n: int
    cliques: tuple[tuple[int, ...], ...]
    parent: tuple[int, ...]

    @property
    def pattern(self) -> set[tuple[int, int]]:
        return {(i, j) for c in self.cliques for i in c for j in c}


def clique_tree(n: int, edges) -> CliqueTree:
    """Clique tree of a chordal extension of the graph ``({0..n-1}, edges)``."""
    g = nx.Graph()
    g.add_nodes_from(range(n))
    g.add_edges_from((i, j) for i, j in edges if i != j)
    if nx.is_chordal(g):
        h = g
    else:
        h, _ = nx.complete_to_chordal_graph(g)
    cliques = [tuple(sorted(c)) for c in nx.chordal_graph_cliques(h)]
    cliques.sort(key=lambda c: (-len(c), c))
    # a maximum-weight spanning tree of the clique intersection graph is a clique tree
    cg = nx.Graph()
    cg.add_nodes_from(range(len(cliques)))
    for a in range(len(cliques)):
        sa = set(cliques[a])
        for b in range(a + 1, len(cliques)):
            w = len(sa.intersection(cliques[b]))
            if w:
                cg.add_edge(a, b, weight=w)
    tree = nx.maximum_spanning_tree(cg)
    order, parent = [], {}
    for comp in nx.connected_components(tree):
        root = min(comp)
        parent[root] = -1
        order.append(root)
        for u, v in nx.bfs_edges(tree, root):
            parent[v] = u
            order.append(v)
    pos = {k: i for i, k in enumerate(order)}
    return CliqueTree(
        n=n,
        cliques=tuple(cliques[k] for k in order),
        parent=tuple(-1 if parent[k] < 0 else pos[parent[k]] for k in order),
    )


def maxdet_completion(partial: np.ndarray, tree: CliqueTree, rcond: float = 1e-9) -> np.ndarray:
    """Fill the entries outside the clique pattern of a Hermitian matrix.

    Entries on the pattern are taken from ``partial``; the rest are chosen as the
    maximum-determinant completion, clique by clique along the tree. Near-singular
    separators use a pseudo-inverse, which yields the rank-preserving completion
    when the clique blocks are rank one. Separator eigenvalues below ``rcond``
    times the largest are treated as zero; a cutoff near machine precision would
    invert solver noise and break positive semidefiniteness.
    """
    n = tree.n
    W = np.array(partial, dtype=complex)
    done: list[int] = []
    seen = np.zeros(n, dtype=bool)
    for k, clique in enumerate(tree.cliques):
        c = np.array(clique)
        if tree.parent[k] < 0:
            new = c[~seen[c]]
            prev = np.array(done, dtype=int)
            if prev.size and new.size:
                # disconnected components: no coupling information
                W[np.ix_(new, prev)] = 0
                W[np.ix_(prev, new)] = 0
        else:
            sep = np.array(sorted(set(clique) & set(tree.cliques[tree.parent[k]])))
            new = c[~seen[c]]
            prev = np.array([u for u in done if u not in set(sep)], dtype=int)
            if new.size and prev.size:
                S = W[np.ix_(sep, sep)]
                fill = W[np.ix_(new, sep)] @ np.linalg.pinv(S, rcond=rcond, hermitian=True) @ W[np.ix_(sep, prev)]
                W[np.ix_(new, prev)] = fill
                W[np.ix_(prev, new)] = fill.conj().T
        seen[c] = True
        done.extend(int(u) for u in new)
    return 0.5 * (W + W.conj().T)
