"""Graph utilities over the bus/branch network: connectivity, spanning trees
and fundamental cycle bases."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

__all__ = [
    "PowerGraph",
    "SpanningTree",
    "Cycle",
    "CycleBasis",
    "DisconnectedGraphError",
    "connected_components",
    "spanning_tree",
    "fundamental_cycles",
]


class DisconnectedGraphError(ValueError):
    def __init__(self, components: list[list[int]]):
        self.components = components
        sizes = ", ".join(str(len(c)) for c in components)
        super().__init__(f"graph has {len(components)} components (sizes {sizes})")


@dataclass(frozen=True)
class PowerGraph:
    """Undirected multigraph on ``n`` vertices.

    ``edges[k] = (u, v, ref)`` where ``ref`` is the originating branch index.
    Parallel edges are kept; each extra parallel edge closes a 2-edge cycle.
    """

    n: int
    edges: tuple[tuple[int, int, int], ...]
    root: int = 0
    adjacency: tuple[tuple[tuple[int, int], ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        adj: list[list[tuple[int, int]]] = [[] for _ in range(self.n)]
        for k, (u, v, _) in enumerate(self.edges):
            if not (0 <= u < self.n and 0 <= v < self.n) or u == v:
                raise ValueError(f"invalid edge {k}: ({u}, {v})")
            adj[u].append((v, k))
            adj[v].append((u, k))
        object.__setattr__(self, "adjacency", tuple(tuple(a) for a in adj))

    @classmethod
    def from_case(cls, case) -> PowerGraph:
        edges = tuple((f, t, k) for k, (f, t) in enumerate(case.branch_ends()))
        return cls(case.n, edges, root=case.slack_index)

    @classmethod
    def from_edges(cls, n: int, pairs, root: int = 0) -> PowerGraph:
        return cls(n, tuple((u, v, k) for k, (u, v) in enumerate(pairs)), root=root)


def connected_components(g: PowerGraph) -> list[list[int]]:
    seen = [False] * g.n
    comps = []
    for s in range(g.n):
        if seen[s]:
            continue
        seen[s] = True
        comp, queue = [], deque([s])
        while queue:
            u = queue.popleft()
            comp.append(u)
            for v, _ in g.adjacency[u]:
                if not seen[v]:
                    seen[v] = True
                    queue.append(v)
        comps.append(sorted(comp))
    return comps


@dataclass(frozen=True)
class SpanningTree:
    root: int
    parent: tuple[int, ...]  # parent[root] == -1
    parent_edge: tuple[int, ...]  # edge index joining v to parent[v]; -1 at root
    depth: tuple[int, ...]
    order: tuple[int, ...]  # BFS order, root first

    @property
    def edges(self) -> frozenset[int]:
        return frozenset(e for e in self.parent_edge if e >= 0)


def spanning_tree(g: PowerGraph, root: int | None = None) -> SpanningTree:
    """BFS spanning tree rooted at ``root`` (default: the graph's root, i.e. the slack)."""
    root = g.root if root is None else root
    parent = [-2] * g.n
    pedge = [-1] * g.n
    depth = [0] * g.n
    parent[root] = -1
    order = [root]
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v, k in g.adjacency[u]:
            if parent[v] == -2:
                parent[v] = u
                pedge[v] = k
                depth[v] = depth[u] + 1
                order.append(v)
                queue.append(v)
    if len(order) != g.n:
        raise DisconnectedGraphError(connected_components(g))
    return SpanningTree(root, tuple(parent), tuple(pedge), tuple(depth), tuple(order))


@dataclass(frozen=True)
class Cycle:
    """Closed walk as oriented edges.

    ``edges[k] = (edge_index, sign)``; ``sign = +1`` means the edge is traversed
    from its stored ``u`` to ``v``. ``vertices`` lists the walk, first == last.
    """

    edges: tuple[tuple[int, int], ...]
    vertices: tuple[int, ...]

    def __len__(self):
        return len(self.edges)


@dataclass(frozen=True)
class CycleBasis:
    cycles: tuple[Cycle, ...]

    def __len__(self):
        return len(self.cycles)

    def __iter__(self):
        return iter(self.cycles)


def _path_to_root(tree: SpanningTree, v: int) -> list[int]:
    path = [v]
    while tree.parent[path[-1]] != -1:
        path.append(tree.parent[path[-1]])
    return path


def fundamental_cycles(g: PowerGraph, tree: SpanningTree) -> CycleBasis:
    """One cycle per non-tree edge: the edge ``u -> v`` then the tree path ``v -> u``."""
    in_tree = tree.edges
    cycles = []
    for k, (u, v, _) in enumerate(g.edges):
        if k in in_tree:
            continue
        pu, pv = _path_to_root(tree, u), _path_to_root(tree, v)
        ancestors_u = {w: i for i, w in enumerate(pu)}
        j = next(j for j, w in enumerate(pv) if w in ancestors_u)
        lca = pv[j]
        # walk v -> lca (up), then lca -> u (down)
        walk = pv[: j + 1] + list(reversed(pu[: ancestors_u[lca]]))
        oriented = [(k, 1)]
        for a, b in zip(walk, walk[1:]):
            # tree edge between a and b is parent_edge of the child
            child = a if tree.parent[a] == b else b
            e = tree.parent_edge[child]
            eu = g.edges[e][0]
            oriented.append((e, 1 if eu == a else -1))
        cycles.append(Cycle(tuple(oriented), tuple([u] + walk)))
    return CycleBasis(tuple(cycles))
