"""Solve conic programs through pluggable interior-point backends.

Two backends are provided:

``clarabel``
    Primary backend. Programs with PSD blocks are passed to Clarabel as their
    Lagrangian dual (the primal point is read back from the dual multipliers),
    which proved markedly more robust on these relaxations; pure second-order
    cone programs are solved directly.
``cvxopt``
    CVXOPT's ``conelp`` on the same prepared primal form; used for cross-checks.

Both backends see a *prepared* program that is equivalent in value to the input:

* a large Hermitian PSD block whose entries are only partly tied to the rest of
  the program is split into the maximal-clique blocks of a chordal extension of
  its pattern; the entries outside the cliques are filled in afterwards by the
  maximum-determinant completion;
* every Hermitian block is transformed by a congruence ``T M T^T`` whose rows
  take scaled voltage differences along the network lines, and 2x2 minor cones
  get the same treatment. Line flows depend on such differences multiplied by
  large admittances, so this keeps the solver's accuracy where it matters.

Interior-point methods converge to the relative interior of the optimal face.
When that face is not a single point (lossless transformers feeding generator
buses are the usual cause) the returned ``W`` has the largest rank available,
even if a rank-one optimum exists. With ``face="min-trace"`` a second solve
minimises ``sum_i W_ii`` over the points whose cost is within ``face_slack``
(relative) of the optimum, which picks a low-rank optimum when there is one.

The backend can be overridden with the ``OPFEXACT_BACKEND`` environment variable.
"""

from __future__ import annotations

import logging
import math
import os
import time
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .chordal import CliqueTree, clique_tree, maxdet_completion
from .conic import ConicProgram, complexify

__all__ = [
    "SolverConfig",
    "LiftedSolution",
    "SupportError",
    "solve",
    "extract_dense_W",
    "available_backends",
]

log = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)
# inner tolerance factor when the primal is read off the dual's multipliers
DUAL_TOL_FACTOR = 1e-2


class SupportError(ValueError):
    """Raised when a dense matrix is requested from a sparse-support solution."""


@dataclass(frozen=True)
class SolverConfig:
    feas_tol: float = 1e-8
    gap_tol: float = 1e-8
    max_iter: int = 500
    time_limit: float = math.inf
    backend: str = "clarabel"
    form: str = "auto"  # clarabel only: "auto" | "primal" | "dual"
    precondition: bool = True
    face: str = "none"  # "none" | "min-trace"
    face_slack: float = 1e-9
    verbose: bool = False

    def __post_init__(self):
        if self.feas_tol <= 0 or self.gap_tol <= 0:
            raise ValueError("solver tolerances must be positive")
        if self.max_iter <= 0 or not self.time_limit > 0:
            raise ValueError("iteration and time limits must be positive")
        if self.form not in ("auto", "primal", "dual"):
            raise ValueError(f"unknown form {self.form!r}")
        if self.face not in ("min-trace", "none"):
            raise ValueError(f"unknown face selection {self.face!r}")
        if not self.face_slack >= 0:
            raise ValueError("face_slack must be nonnegative")

    def resolved_backend(self) -> str:
        return os.environ.get("OPFEXACT_BACKEND", self.backend).lower()

    def to_dict(self) -> dict:
        return {"backend": self.resolved_backend(), "feas_tol": self.feas_tol, "gap_tol": self.gap_tol,
                "max_iter": self.max_iter, "time_limit": self.time_limit, "form": self.form,
                "precondition": self.precondition, "face": self.face, "face_slack": self.face_slack}


@dataclass
class LiftedSolution:
    status: str  # optimal | infeasible | unbounded | numerical-failure
    objective: float
    x: np.ndarray | None = None
    W_entries: dict[tuple[int, int], complex] = field(default_factory=dict)
    W_dense: np.ndarray | None = None
    v: np.ndarray | None = None
    pg: np.ndarray | None = None
    qg: np.ndarray | None = None
    flows: np.ndarray | None = None  # rows: branch; cols: pf, qf, pt, qt
    support: str = ""
    kind: str = ""
    n: int = 0
    gap: float = math.nan
    iterations: int = 0
    solve_time: float = 0.0
    backend: str = ""
    diagnostics: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"

    def W(self, i: int, j: int) -> complex:
        if i <= j:
            return self.W_entries[(i, j)]
        return np.conj(self.W_entries[(j, i)])

    def injections(self, case) -> tuple[np.ndarray, np.ndarray]:
        """Net generation per bus (p, q), per-unit."""
        p = np.zeros(case.n)
        q = np.zeros(case.n)
        for g, gen in enumerate(case.generators):
            p[case.index[gen.bus]] += self.pg[g]
            q[case.index[gen.bus]] += self.qg[g]
        return p, q


# ---------------------------------------------------------------------------
# prepared standard form


@dataclass
class _PsdPart:
    """One PSD cone of the prepared form and how it maps back to the input."""

    block: int  # index into prog.psd
    real_pos: np.ndarray  # positions in the input block's real matrix
    T: np.ndarray  # real congruence applied (prepared = T M T^T)
    complex_pos: np.ndarray | None = None  # clique positions for Hermitian blocks


@dataclass
class _Prepared:
    """``min c x  s.t.  A x + s = b``, ``s`` in ``cones``, over columns ``cols``.

    ``cones`` is a list of ``(kind, size)`` with kinds ``zero``, ``nonneg``,
    ``soc`` and ``psd``; PSD rows are the scaled upper triangle, column-major.
    """

    c: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    cones: list[tuple[str, int]]
    cols: np.ndarray
    parts: list[_PsdPart]
    trees: dict[int, CliqueTree]


def _rsoc_to_soc(F: sp.csr_matrix, g: np.ndarray) -> tuple[sp.csr_matrix, np.ndarray]:
    k = F.shape[0]
    T = sp.lil_matrix((k, k))
    T[0, 0] = T[0, 1] = T[1, 0] = 1 / SQRT2
    T[1, 1] = -1 / SQRT2
    for r in range(2, k):
        T[r, r] = 1.0
    T = T.tocsr()
    return sp.csr_matrix(T @ F), T @ g


def _minor_map(delta: float) -> np.ndarray:
    """Congruence by ``[[1, 0], [-1, 1] / delta]`` on a minor cone ``(a, b, sqrt2 Re c, sqrt2 Im c)``."""
    d2 = delta * delta
    return np.array([
        [1.0, 0.0, 0.0, 0.0],
        [1 / d2, 1 / d2, -SQRT2 / d2, 0.0],
        [-SQRT2 / delta, 0.0, 1 / delta, 0.0],
        [0.0, 0.0, 0.0, 1 / delta],
    ])


def _triangle(d: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major flat indices and scales of the scaled upper triangle, column-major."""
    idx, scale = [], []
    for j in range(d):
        for i in range(j + 1):
            idx.append(i * d + j)
            scale.append(1.0 if i == j else SQRT2)
    return np.array(idx), np.array(scale)


def _untriangle(s: np.ndarray, d: int) -> np.ndarray:
    idx, scale = _triangle(d)
    m = np.zeros(d * d)
    m[idx] = s / scale
    m = m.reshape(d, d)
    return np.triu(m) + np.triu(m, 1).T


def _cone_slices(cones):
    off = 0
    for kind, size in cones:
        rows = size * (size + 1) // 2 if kind == "psd" else size
        yield kind, size, slice(off, off + rows)
        off += rows


def _difference_congruence(m: int, lines: list[tuple[int, int, float]]) -> np.ndarray:
    """Rows ``(e_k - e_parent) / delta`` along a BFS forest of the line edges."""
    adj: list[list[tuple[int, float]]] = [[] for _ in range(m)]
    for a, b, delta in lines:
        adj[a].append((b, delta))
        adj[b].append((a, delta))
    T = np.eye(m)
    seen = [False] * m
    for root in range(m):
        if seen[root]:
            continue
        seen[root] = True
        queue = deque([root])
        while queue:
            u = queue.popleft()
            for v, delta in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    T[v, v] = 1 / delta
                    T[v, u] = -1 / delta
                    queue.append(v)
    return T


def _exclusive_vars(prog: ConicProgram) -> dict[int, set[int]]:
    """Per PSD block, the zero-cost variables that appear nowhere else."""
    other = np.zeros(prog.n_vars, dtype=int)
    for M in [prog.A_eq, prog.A_in] + [b.F for b in prog.soc + prog.rsoc]:
        other[np.unique(sp.csr_matrix(M).indices)] += 1
    other[prog.c != 0] += 1
    owner = -np.ones(prog.n_vars, dtype=int)
    for k, blk in enumerate(prog.psd):
        for j in np.unique(blk.F.indices):
            owner[j] = k if owner[j] == -1 else -2
    out: dict[int, set[int]] = {k: set() for k in range(len(prog.psd))}
    for j in np.flatnonzero((owner >= 0) & (other == 0)):
        out[int(owner[j])].add(int(j))
    return out


def _hermitian_split(blk, exclusive: set[int], precondition: bool) -> tuple[list[_PsdPart], CliqueTree | None]:
    """Clique blocks (with their congruences) for the real embedding of a Hermitian block."""
    D = blk.dim
    d = D // 2
    F = blk.F.tocsr()

    def specified(r: int) -> bool:
        if blk.g[r] != 0:
            return True
        cols = F.indices[F.indptr[r]:F.indptr[r + 1]]
        return any(int(c) not in exclusive for c in cols)

    edges = []
    for a in range(d):
        for b in range(a + 1, d):
            rows = (a * D + b, (d + a) * D + d + b, (d + a) * D + b, a * D + d + b)
            if any(specified(r) for r in rows):
                edges.append((a, b))
    tree = None
    if len(edges) == d * (d - 1) // 2:
        cliques = [tuple(range(d))]
    else:
        tree = clique_tree(d, edges)
        cliques = list(tree.cliques)
    lines = blk.meta.get("lines", []) if precondition else []
    parts = []
    for clique in cliques:
        c = np.array(clique)
        local = {int(p): k for k, p in enumerate(c)}
        sub_lines = [(local[a], local[b], delta) for a, b, delta in lines if a in local and b in local]
        Tc = _difference_congruence(len(c), sub_lines)
        T = np.block([[Tc, np.zeros_like(Tc)], [np.zeros_like(Tc), Tc]])
        parts.append(_PsdPart(block=-1, real_pos=np.concatenate([c, c + d]), T=T, complex_pos=c))
    return parts, tree


def _prepare(prog: ConicProgram, precondition: bool = True) -> _Prepared:
    n = prog.n_vars
    blocks_A, blocks_b, cones = [], [], []
    if prog.A_eq.shape[0]:
        blocks_A.append(prog.A_eq)
        blocks_b.append(prog.b_eq)
        cones.append(("zero", prog.A_eq.shape[0]))
    if prog.A_in.shape[0]:
        blocks_A.append(prog.A_in)
        blocks_b.append(prog.b_in)
        cones.append(("nonneg", prog.A_in.shape[0]))
    for blk in prog.soc:
        blocks_A.append(-blk.F)
        blocks_b.append(blk.g)
        cones.append(("soc", blk.dim))
    for blk in prog.rsoc:
        F, g = blk.F, blk.g
        delta = blk.meta.get("minor_scale")
        if precondition and delta and blk.dim == 4:
            L = _minor_map(delta)
            F, g = sp.csr_matrix(L @ F), L @ g
        F, g = _rsoc_to_soc(F, g)
        blocks_A.append(-F)
        blocks_b.append(g)
        cones.append(("soc", blk.dim))

    exclusive = _exclusive_vars(prog)
    parts: list[_PsdPart] = []
    trees: dict[int, CliqueTree] = {}
    for k, blk in enumerate(prog.psd):
        if blk.meta.get("complex") and blk.dim % 2 == 0:
            sub, tree = _hermitian_split(blk, exclusive[k], precondition)
            if tree is not None:
                trees[k] = tree
        else:
            sub = [_PsdPart(block=-1, real_pos=np.arange(blk.dim), T=np.eye(blk.dim))]
        F = blk.F.tocsr()
        for part in sub:
            part.block = k
            pos = part.real_pos
            m = pos.size
            rows = (pos[:, None] * blk.dim + pos[None, :]).ravel()
            Ts = sp.csr_matrix(part.T)
            K = sp.kron(Ts, Ts, format="csr")
            Fm = sp.csr_matrix(K @ F[rows])
            gm = K @ blk.g[rows]
            idx, scale = _triangle(m)
            Dg = sp.diags(scale)
            blocks_A.append(-(Dg @ Fm[idx]))
            blocks_b.append(scale * gm[idx])
            cones.append(("psd", m))
            parts.append(part)

    A = sp.vstack(blocks_A).tocsr() if blocks_A else sp.csr_matrix((0, n))
    A.eliminate_zeros()
    b = np.concatenate(blocks_b) if blocks_b else np.zeros(0)
    # entries outside every clique leave some variables unreferenced
    used = np.zeros(n, dtype=bool)
    used[np.unique(A.indices)] = True
    used |= prog.c != 0
    cols = np.flatnonzero(used)
    return _Prepared(prog.c[cols].copy(), A[:, cols].tocsr(), b, cones, cols, parts, trees)


# ---------------------------------------------------------------------------
# clarabel


def _clarabel_cones(cones):
    import clarabel

    out = []
    for kind, size in cones:
        if kind == "zero":
            out.append(clarabel.ZeroConeT(size))
        elif kind == "nonneg":
            out.append(clarabel.NonnegativeConeT(size))
        elif kind == "soc":
            out.append(clarabel.SecondOrderConeT(size))
        elif kind == "psd":
            out.append(clarabel.PSDTriangleConeT(size))
    return out


def _clarabel_settings(cfg: SolverConfig):
    import clarabel

    st = clarabel.DefaultSettings()
    st.verbose = cfg.verbose
    st.tol_feas = cfg.feas_tol
    st.tol_gap_rel = cfg.gap_tol
    st.tol_gap_abs = cfg.gap_tol
    st.max_iter = cfg.max_iter
    if math.isfinite(cfg.time_limit):
        st.time_limit = cfg.time_limit
    return st


_CLARABEL_STATUS = {
    "Solved": "optimal",
    "AlmostSolved": "optimal",
    "PrimalInfeasible": "infeasible",
    "AlmostPrimalInfeasible": "infeasible",
    "DualInfeasible": "unbounded",
    "AlmostDualInfeasible": "unbounded",
}


def _run_clarabel(c, A, b, cones, cfg):
    import clarabel

    P = sp.csc_matrix((A.shape[1], A.shape[1]))
    solver = clarabel.DefaultSolver(P, np.asarray(c, float), sp.csc_matrix(A), np.asarray(b, float),
                                    _clarabel_cones(cones), _clarabel_settings(cfg))
    return solver.solve()


def _pure_psd_columns(pre: _Prepared) -> tuple[np.ndarray, np.ndarray]:
    """Zero-cost columns confined to one PSD cone, and the rows holding only such columns.

    Those rows can be dropped (the entries become free in the cone) without
    changing the optimal value; the columns are recovered from the completed
    slack afterwards.
    """
    m, n = pre.A.shape
    cone_of = -np.ones(m, dtype=int)
    for k, (kind, _, sl) in enumerate(_cone_slices(pre.cones)):
        if kind == "psd":
            cone_of[sl] = k
    Ac = pre.A.tocsc()
    pure = np.zeros(n, dtype=bool)
    for j in range(n):
        rows = Ac.indices[Ac.indptr[j]:Ac.indptr[j + 1]]
        pure[j] = (rows.size > 0 and pre.c[j] == 0 and (cone_of[rows] >= 0).all()
                   and np.unique(cone_of[rows]).size == 1)
    Ar = pre.A.tocsr()
    psd_rows = np.flatnonzero(cone_of >= 0)
    changed = True
    while changed:  # a row mixing pure and ordinary columns pins its pure columns
        changed = False
        for r in psd_rows:
            cols = Ar.indices[Ar.indptr[r]:Ar.indptr[r + 1]]
            if cols.size and pure[cols].any() and not pure[cols].all():
                pure[cols] = False
                changed = True
    drop = np.zeros(m, dtype=bool)
    for r in psd_rows:
        cols = Ar.indices[Ar.indptr[r]:Ar.indptr[r + 1]]
        drop[r] = cols.size > 0 and bool(pure[cols].all()) and pre.b[r] == 0
    for j in np.flatnonzero(pure):  # every row of an eliminated column must go
        rows = Ac.indices[Ac.indptr[j]:Ac.indptr[j + 1]]
        if not drop[rows].all():
            pure[j] = False
    drop[:] = False
    for j in np.flatnonzero(pure):
        drop[Ac.indices[Ac.indptr[j]:Ac.indptr[j + 1]]] = True
    return pure, drop


def _clarabel_primal(pre: _Prepared, cfg: SolverConfig):
    sol = _run_clarabel(pre.c, pre.A, pre.b, pre.cones, cfg)
    status = _CLARABEL_STATUS.get(str(sol.status), "numerical-failure")
    diag = {"form": "primal", "raw_status": str(sol.status)}
    return status, np.array(sol.x), np.array(sol.s), sol, diag


def _clarabel_dual(pre: _Prepared, cfg: SolverConfig):
    """Solve the Lagrangian dual; the primal point is its multiplier vector."""
    pure, drop = _pure_psd_columns(pre)
    keep_cols = np.flatnonzero(~pure)
    keep_rows = np.flatnonzero(~drop)
    A = pre.A[keep_rows][:, keep_cols].tocsr()
    b = pre.b[keep_rows]
    c = pre.c[keep_cols]
    row_pos = -np.ones(pre.A.shape[0], dtype=int)
    row_pos[keep_rows] = np.arange(keep_rows.size)

    # variables z (one per kept row):  min b'z  s.t.  A'z + c = 0,  z in K*
    rows_A = [A.T.tocsr()]
    rows_b = [-c]
    cones = [("zero", keep_cols.size)]
    m = keep_rows.size
    for kind, size, sl in _cone_slices(pre.cones):
        if kind == "zero":
            continue  # multipliers of equalities are free
        full = np.arange(sl.start, sl.stop)
        pos = row_pos[full]
        sel = np.flatnonzero(pos >= 0)
        E = sp.csr_matrix((-np.ones(sel.size), (sel, pos[sel])), shape=(full.size, m))
        rows_A.append(E)
        rows_b.append(np.zeros(full.size))
        cones.append((kind, size))
    AD = sp.vstack(rows_A).tocsr()
    bD = np.concatenate(rows_b)
    # the primal point comes from multipliers, which converge more slowly than
    # the dual iterate itself; tighten so the primal meets the requested tolerances
    inner = replace(cfg, feas_tol=cfg.feas_tol * DUAL_TOL_FACTOR, gap_tol=cfg.gap_tol * DUAL_TOL_FACTOR)
    sol = _run_clarabel(b, AD, bD, cones, inner)
    status = _CLARABEL_STATUS.get(str(sol.status), "numerical-failure")
    # infeasibility certificates swap roles between a problem and its dual
    status = {"infeasible": "unbounded", "unbounded": "infeasible"}.get(status, status)

    xi = np.array(sol.z)
    x = np.zeros(pre.A.shape[1])
    x[keep_cols] = -xi[:keep_cols.size]
    s = np.zeros(pre.A.shape[0])
    off = keep_cols.size
    for kind, size, sl in _cone_slices(pre.cones):
        if kind == "zero":
            continue
        rows = sl.stop - sl.start
        s[sl] = xi[off:off + rows]
        off += rows
    if pure.any():  # eliminated columns from the slack, averaging their duplicates
        Ac = pre.A.tocsc()
        for j in np.flatnonzero(pure):
            rows = Ac.indices[Ac.indptr[j]:Ac.indptr[j + 1]]
            coef = Ac.data[Ac.indptr[j]:Ac.indptr[j + 1]]
            x[j] = float(np.mean((pre.b[rows] - s[rows]) / coef))
    diag = {"form": "dual", "raw_status": str(sol.status), "eliminated_vars": int(pure.sum()),
            "dropped_rows": int(drop.sum())}
    return status, x, s, sol, diag


def _solve_clarabel(pre: _Prepared, cfg: SolverConfig):
    form = cfg.form
    if form == "auto":
        form = "dual" if any(kind == "psd" for kind, _ in pre.cones) else "primal"
    if form == "dual":
        status, x, s, sol, diag = _clarabel_dual(pre, cfg)
    else:
        status, x, s, sol, diag = _clarabel_primal(pre, cfg)
    gap = abs(sol.obj_val - sol.obj_val_dual) / max(1.0, abs(sol.obj_val))
    return status, x, s, gap, int(sol.iterations), diag


# ---------------------------------------------------------------------------
# cvxopt


def _solve_cvxopt(pre: _Prepared, cfg: SolverConfig):
    import cvxopt
    from cvxopt import solvers

    def spm(m):
        m = sp.coo_matrix(m)
        return cvxopt.spmatrix(m.data.tolist(), m.row.tolist(), m.col.tolist(), size=m.shape)

    n = pre.A.shape[1]
    A = pre.A.tocsr()
    eq_A, eq_b = sp.csr_matrix((0, n)), np.zeros(0)
    G_blocks, h_blocks, dims = [], [], {"l": 0, "q": [], "s": []}
    for kind, size, sl in _cone_slices(pre.cones):
        if kind == "zero":
            eq_A, eq_b = A[sl], pre.b[sl]
        elif kind == "nonneg":
            G_blocks.append(A[sl])
            h_blocks.append(pre.b[sl])
            dims["l"] += size
        elif kind == "soc":
            G_blocks.append(A[sl])
            h_blocks.append(pre.b[sl])
            dims["q"].append(size)
        else:  # scaled triangle -> full column-major
            idx, scale = _triangle(size)
            tri_of = np.zeros(size * size, dtype=int)
            sc = np.zeros(size * size)
            for t, (flat, s_) in enumerate(zip(idx, scale)):
                i, j = divmod(int(flat), size)
                for a, b_ in ((i, j), (j, i)):
                    tri_of[b_ * size + a] = t
                    sc[b_ * size + a] = s_
            G_blocks.append(sp.diags(1 / sc) @ A[sl][tri_of])
            h_blocks.append(pre.b[sl][tri_of] / sc)
            dims["s"].append(size)
    G = sp.vstack(G_blocks).tocsr() if G_blocks else sp.csr_matrix((0, n))
    h = np.concatenate(h_blocks) if h_blocks else np.zeros(0)
    opts = {"show_progress": cfg.verbose, "abstol": cfg.gap_tol, "reltol": cfg.gap_tol,
            "feastol": cfg.feas_tol, "maxiters": cfg.max_iter, "refinement": 3}
    kw = {}
    if eq_A.shape[0]:
        kw = {"A": spm(eq_A), "b": cvxopt.matrix(eq_b.astype(float))}
    res = solvers.conelp(cvxopt.matrix(pre.c.astype(float)), spm(G), cvxopt.matrix(h.astype(float)),
                         dims, options=opts, kktsolver="ldl", **kw)
    raw = res["status"]
    status = {"optimal": "optimal", "primal infeasible": "infeasible",
              "dual infeasible": "unbounded"}.get(raw, "numerical-failure")
    if raw == "unknown" and res["x"] is not None:
        # stalled close to the solution; accept when the certificates are small
        if (res["relative gap"] is not None and res["relative gap"] < 1e-6
                and res["primal infeasibility"] < 1e-6 and res["dual infeasibility"] < 1e-6):
            status = "optimal"
    x = np.array(res["x"]).ravel() if res["x"] is not None else np.full(n, np.nan)
    s = np.zeros(pre.A.shape[0])
    if res["s"] is not None:
        sv = np.array(res["s"]).ravel()
        off = dims["l"] + sum(dims["q"])
        q_off = 0
        for kind, size, sl in _cone_slices(pre.cones):
            if kind == "zero":
                continue
            if kind in ("nonneg", "soc"):
                s[sl] = sv[q_off:q_off + size]
                q_off += size
            else:
                full = sv[off:off + size * size].reshape(size, size).T
                idx, scale = _triangle(size)
                s[sl] = full.ravel()[idx] * scale
                off += size * size
    gap = res["relative gap"] if res["relative gap"] is not None else math.nan
    return status, x, s, float(gap), int(res["iterations"]), {"form": "primal", "raw_status": raw}


_BACKENDS = {"clarabel": _solve_clarabel, "cvxopt": _solve_cvxopt}


def available_backends() -> list[str]:
    out = []
    for name in _BACKENDS:
        try:
            __import__(name)
            out.append(name)
        except ImportError:
            pass
    return out


# ---------------------------------------------------------------------------


def solve(prog: ConicProgram, cfg: SolverConfig | None = None) -> LiftedSolution:
    """Solve ``prog`` and map the result back onto lifted OPF quantities.

    ``objective`` is the cost of the returned point; with face selection the
    first-stage optimal value is kept in ``diagnostics["optimal_value"]``.
    """
    cfg = cfg or SolverConfig()
    sol = _solve_once(prog, cfg)
    idx = prog.meta.get("index")
    if cfg.face == "none" or not sol.optimal or idx is None or not idx.diag:
        return sol
    sol.diagnostics["optimal_value"] = sol.objective
    second = _solve_once(_min_trace_program(prog, sol.objective, cfg.face_slack), cfg)
    if not second.optimal:
        sol.diagnostics["face_selection"] = f"skipped: second stage {second.status}"
        return sol
    second.objective = prog.objective(second.x)
    second.iterations += sol.iterations
    second.solve_time += sol.solve_time
    second.diagnostics["optimal_value"] = sol.objective
    second.diagnostics["face_selection"] = "min-trace"
    second.diagnostics["residuals"] = prog.residuals(second.x)
    return second


def _min_trace_program(prog: ConicProgram, value: float, slack: float) -> ConicProgram:
    """``prog`` with its cost capped near ``value`` and ``sum_i W_ii`` as objective."""
    c = np.zeros(prog.n_vars)
    for k in prog.meta["index"].diag.values():
        c[k] = 1.0
    level = value + slack * max(abs(value), 1.0) - prog.c0
    A_in = sp.vstack([prog.A_in, sp.csr_matrix(prog.c.reshape(1, -1))]).tocsr()
    return replace(prog, c=c, c0=0.0, A_in=A_in, b_in=np.append(prog.b_in, level),
                   in_tags=list(prog.in_tags) + ["cost level"])


def _solve_once(prog: ConicProgram, cfg: SolverConfig) -> LiftedSolution:
    name = cfg.resolved_backend()
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {sorted(_BACKENDS)}")
    meta = prog.meta
    base = dict(backend=name, kind=meta.get("kind", ""), n=meta.get("n", 0), support=meta.get("support", ""))
    t0 = time.perf_counter()
    try:
        pre = _prepare(prog, cfg.precondition)
        status, xs, s, gap, iters, diag = _BACKENDS[name](pre, cfg)
    except Exception as exc:  # a backend crash is reported, not raised
        log.warning("backend %s failed: %s", name, exc)
        return LiftedSolution(status="numerical-failure", objective=math.nan,
                              solve_time=time.perf_counter() - t0,
                              diagnostics={"error": repr(exc)}, **base)
    elapsed = time.perf_counter() - t0
    sol = LiftedSolution(status=status, objective=math.nan, gap=gap, iterations=iters,
                         solve_time=elapsed, diagnostics=diag, **base)
    sol.diagnostics["config"] = cfg.to_dict()
    if status != "optimal":
        return sol
    x = np.full(prog.n_vars, np.nan)
    x[pre.cols] = xs
    disc, mismatch = _complete(prog, pre, x, s)
    sol.x = x
    sol.objective = prog.objective(x)
    sol.diagnostics["residuals"] = prog.residuals(x)
    sol.diagnostics["realify_discrepancy"] = disc
    sol.diagnostics["slack_vs_vars"] = mismatch
    _map_lifted(prog, sol)
    return sol


def _complete(prog: ConicProgram, pre: _Prepared, x: np.ndarray, s: np.ndarray) -> tuple[float, float]:
    """Fill variables outside the cliques; compare the solver's PSD slacks with ``x``.

    Returns the largest Hermitian-duplicate discrepancy of the solver's matrices
    and the largest mismatch between those matrices and ``F x + g``.
    """
    slacks = [_untriangle(s[sl], size) for kind, size, sl in _cone_slices(pre.cones) if kind == "psd"]
    known = ~np.isnan(x)
    x0 = np.where(known, x, 0.0)
    disc = mismatch = 0.0
    for part, S in zip(pre.parts, slacks):
        blk = prog.psd[part.block]
        Tinv = np.linalg.inv(part.T)
        M = Tinv @ S @ Tinv.T  # back to the input coordinates
        pos = part.real_pos
        rows = (pos[:, None] * blk.dim + pos[None, :]).ravel()
        mismatch = max(mismatch, float(np.max(np.abs(M.ravel() - (blk.F[rows] @ x0 + blk.g[rows])))))
        if part.complex_pos is not None:
            disc = max(disc, complexify(M)[1])
    for k, tree in pre.trees.items():
        blk = prog.psd[k]
        d = blk.dim // 2
        V = (blk.F @ x0 + blk.g).reshape(blk.dim, blk.dim)
        Wp, _ = complexify(V)
        Wc = maxdet_completion(Wp, tree)
        R = np.block([[Wc.real, -Wc.imag], [Wc.imag, Wc.real]]).ravel()
        F = blk.F.tocsc()
        for j in np.flatnonzero(~known):
            rows = F.indices[F.indptr[j]:F.indptr[j + 1]]
            if rows.size == 0:
                continue
            coef = F.data[F.indptr[j]:F.indptr[j + 1]]
            # each row holds this variable alone (entries outside the cliques)
            x[j] = float(np.mean((R[rows] - blk.g[rows]) / coef))
        assert Wc.shape == (d, d)
    x[np.isnan(x)] = 0.0
    return disc, mismatch


def _map_lifted(prog: ConicProgram, sol: LiftedSolution) -> None:
    idx = prog.meta.get("index")
    if idx is None:
        return
    x = sol.x
    for i, k in idx.diag.items():
        sol.W_entries[(i, i)] = complex(x[k])
    for (i, j), (re, im) in idx.offdiag.items():
        sol.W_entries[(i, j)] = complex(x[re], x[im])
    if idx.v:
        sol.v = np.array([complex(x[re], 0.0 if im is None else x[im]) for re, im in
                          (idx.v[i] for i in range(idx.n))])
    pos = {nm: k for k, nm in enumerate(prog.var_names)}
    ng = sum(1 for nm in prog.var_names if nm.startswith("pg["))
    sol.pg = np.array([x[pos[f"pg[{g + 1}]"]] for g in range(ng)])
    sol.qg = np.array([x[pos[f"qg[{g + 1}]"]] for g in range(ng)])
    nb = sum(1 for nm in prog.var_names if nm.startswith("pf["))
    sol.flows = np.array([[x[pos[f"{c}[{k + 1}]"]] for c in ("pf", "qf", "pt", "qt")] for k in range(nb)])
    if sol.support == "full":
        W = np.array([[sol.W(i, j) for j in range(idx.n)] for i in range(idx.n)])
        sol.W_dense = 0.5 * (W + W.conj().T)


def extract_dense_W(sol: LiftedSolution, n: int | None = None) -> np.ndarray:
    """Dense Hermitian ``W`` of a full-support (SDR) solution."""
    if sol.support != "full" or sol.W_dense is None:
        raise SupportError(
            f"solution has {sol.support or 'unknown'} support; use the sparse completion path "
            "(tightness_check / cycle_check / complete_rank1) instead")
    W = sol.W_dense
    if n is not None and W.shape != (n, n):
        raise ValueError(f"expected {n}x{n}, solution has {W.shape}")
    return 0.5 * (W + W.conj().T)
