"""Solver-agnostic conic programs in real standard form.

A :class:`ConicProgram` minimises ``c @ x + c0`` subject to

* ``A_eq @ x == b_eq``
* ``A_in @ x <= b_in``
* ``F @ x + g`` in a second-order cone ``{(t, z): t >= ||z||}``
* ``F @ x + g`` in a rotated cone ``{(u, w, z): 2 u w >= ||z||^2, u, w >= 0}``
* ``F @ x + g`` reshaped (row-major) to a ``d x d`` symmetric matrix that is PSD.

Programs are assembled with :class:`ProgramBuilder` from :class:`Lin` affine
expressions and frozen into sparse matrices.
"""

from __future__ import annotations

import io
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import IO

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Lin",
    "ConeBlock",
    "PSDBlock",
    "HermitianBlock",
    "ConicProgram",
    "ProgramBuilder",
    "realify",
    "write_cbf",
    "read_cbf",
]


class Lin:
    """Sparse affine expression ``sum(coef * x[var]) + const``."""

    __slots__ = ("terms", "const")

    def __init__(self, terms: dict[int, float] | None = None, const: float = 0.0):
        self.terms = dict(terms) if terms else {}
        self.const = float(const)

    @classmethod
    def var(cls, k: int, coef: float = 1.0) -> Lin:
        return cls({k: coef})

    def copy(self) -> Lin:
        return Lin(self.terms, self.const)

    def __add__(self, other) -> Lin:
        out = self.copy()
        if isinstance(other, Lin):
            for k, v in other.terms.items():
                out.terms[k] = out.terms.get(k, 0.0) + v
            out.const += other.const
        else:
            out.const += float(other)
        return out

    __radd__ = __add__

    def __neg__(self) -> Lin:
        return Lin({k: -v for k, v in self.terms.items()}, -self.const)

    def __sub__(self, other) -> Lin:
        return self + (-other if isinstance(other, Lin) else -float(other))

    def __rsub__(self, other) -> Lin:
        return (-self) + other

    def __mul__(self, a: float) -> Lin:
        a = float(a)
        return Lin({k: a * v for k, v in self.terms.items()}, a * self.const)

    __rmul__ = __mul__

    def value(self, x: np.ndarray) -> float:
        return self.const + sum(v * x[k] for k, v in self.terms.items())

    def __repr__(self):
        body = " + ".join(f"{v:g}*x{k}" for k, v in sorted(self.terms.items()))
        return f"Lin({body or '0'} + {self.const:g})"


ZERO = Lin()


def _rows_to_csr(rows: list[Lin], n: int) -> tuple[sp.csr_matrix, np.ndarray]:
    data, ri, ci = [], [], []
    for r, lin in enumerate(rows):
        for k, v in lin.terms.items():
            if v != 0.0:
                ri.append(r)
                ci.append(k)
                data.append(v)
    mat = sp.csr_matrix((data, (ri, ci)), shape=(len(rows), n))
    mat.sum_duplicates()
    mat.sort_indices()
    return mat, np.array([lin.const for lin in rows], dtype=float)


@dataclass
class ConeBlock:
    """``F @ x + g`` constrained to a (rotated) second-order cone.

    ``meta`` may carry ``{"minor_scale": delta}`` for rotated cones that encode a
    2x2 Hermitian minor ``(W_ii, W_jj, sqrt2 Re W_ij, sqrt2 Im W_ij)``; solvers may
    use it to rescale the voltage-difference direction.
    """

    F: sp.csr_matrix
    g: np.ndarray
    tag: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.F.shape[0]

    def value(self, x: np.ndarray) -> np.ndarray:
        return self.F @ x + self.g


@dataclass
class PSDBlock:
    """Real symmetric ``d x d`` matrix ``reshape(F @ x + g, (d, d))`` constrained PSD.

    ``meta`` carries optional structure, e.g. ``{"complex": True, "buses": [...]}``
    for real embeddings of a Hermitian block indexed by buses.
    """

    dim: int
    F: sp.csr_matrix
    g: np.ndarray
    tag: str = ""
    meta: dict = field(default_factory=dict)

    def value(self, x: np.ndarray) -> np.ndarray:
        return (self.F @ x + self.g).reshape(self.dim, self.dim)


@dataclass
class HermitianBlock:
    """Complex Hermitian ``d x d`` affine matrix ``RE(x) + 1j * IM(x)``.

    ``re`` and ``im`` are ``d x d`` nested lists of :class:`Lin`.
    """

    re: list[list[Lin]]
    im: list[list[Lin]]

    @property
    def dim(self) -> int:
        return len(self.re)

    def value(self, x: np.ndarray) -> np.ndarray:
        d = self.dim
        out = np.zeros((d, d), dtype=complex)
        for i in range(d):
            for j in range(d):
                out[i, j] = self.re[i][j].value(x) + 1j * self.im[i][j].value(x)
        return out


def realify(block):
    """Real symmetric embedding ``[[Re M, -Im M], [Im M, Re M]]`` of a Hermitian block.

    Accepts a numeric complex array (returns a real array of twice the size) or
    a :class:`HermitianBlock` (returns the embedded ``2d x 2d`` nested list of
    :class:`Lin`). The complex block is PSD iff the real one is; every
    eigenvalue appears twice.
    """
    if isinstance(block, HermitianBlock):
        d = block.dim
        out = [[ZERO] * (2 * d) for _ in range(2 * d)]
        for i in range(d):
            for j in range(d):
                re, im = block.re[i][j], block.im[i][j]
                out[i][j] = re
                out[d + i][d + j] = re
                out[d + i][j] = im
                out[i][d + j] = -im
        return out
    m = np.asarray(block)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("realify expects a square matrix")
    return np.block([[m.real, -m.imag], [m.imag, m.real]])


def complexify(z: np.ndarray) -> tuple[np.ndarray, float]:
    """Inverse of :func:`realify` with duplicate averaging.

    Returns the Hermitian matrix and the largest discrepancy between the
    structural duplicates of the real embedding.
    """
    d = z.shape[0] // 2
    a, b = z[:d, :d], z[d:, d:]
    c, e = z[d:, :d], z[:d, d:]
    disc = float(max(np.max(np.abs(a - b), initial=0.0), np.max(np.abs(c + e), initial=0.0)))
    w = 0.5 * (a + b) + 0.5j * (c - e)
    w = 0.5 * (w + w.conj().T)
    return w, disc


@dataclass
class ConicProgram:
    n_vars: int
    var_names: list[str]
    c: np.ndarray
    c0: float
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    A_in: sp.csr_matrix
    b_in: np.ndarray
    soc: list[ConeBlock]
    rsoc: list[ConeBlock]
    psd: list[PSDBlock]
    eq_tags: list[str]
    in_tags: list[str]
    meta: dict = field(default_factory=dict)

    def objective(self, x: np.ndarray) -> float:
        return float(self.c @ x + self.c0)

    def counts(self) -> dict[str, int]:
        return {
            "variables": self.n_vars,
            "eq_rows": self.A_eq.shape[0],
            "ineq_rows": self.A_in.shape[0],
            "soc": len(self.soc),
            "rsoc": len(self.rsoc),
            "psd": len(self.psd),
            "psd_max_dim": max((b.dim for b in self.psd), default=0),
        }

    def residuals(self, x: np.ndarray) -> dict[str, float]:
        """Largest violation of each constraint family at ``x``."""
        out = {
            "eq": float(np.max(np.abs(self.A_eq @ x - self.b_eq), initial=0.0)),
            "ineq": float(np.max(self.A_in @ x - self.b_in, initial=0.0)),
        }
        soc = 0.0
        for blk in self.soc:
            v = blk.value(x)
            soc = max(soc, np.linalg.norm(v[1:]) - v[0])
        out["soc"] = max(soc, 0.0)
        rsoc = 0.0
        for blk in self.rsoc:
            # 2 u v >= |w|^2, u, v >= 0 is the cone ((u+v)/sqrt2, (u-v)/sqrt2, w) in SOC
            v = blk.value(x)
            head = (v[0] + v[1]) / math.sqrt(2)
            tail = np.hypot((v[0] - v[1]) / math.sqrt(2), np.linalg.norm(v[2:]))
            rsoc = max(rsoc, float(tail - head))
        out["rsoc"] = max(rsoc, 0.0)
        psd = 0.0
        for blk in self.psd:
            m = blk.value(x)
            psd = max(psd, -float(np.linalg.eigvalsh(0.5 * (m + m.T))[0]))
        out["psd"] = max(psd, 0.0)
        return out

    def referenced_variables(self) -> np.ndarray:
        used = np.zeros(self.n_vars, dtype=bool)
        for mat in [self.A_eq, self.A_in] + [b.F for b in self.soc + self.rsoc + self.psd]:
            used[mat.indices] = True
        return used

    def validate(self) -> None:
        if not self.referenced_variables().all():
            missing = [self.var_names[k] for k in np.flatnonzero(~self.referenced_variables())]
            raise ValueError(f"unreferenced variables: {missing[:5]}")
        for blk in self.psd:
            if blk.F.shape[0] != blk.dim**2:
                raise ValueError(f"PSD block {blk.tag!r} has inconsistent size")
            d = blk.dim
            perm = np.arange(d * d).reshape(d, d).T.ravel()
            if (blk.F - blk.F[perm]).count_nonzero() or np.any(blk.g != blk.g[perm]):
                raise ValueError(f"PSD block {blk.tag!r} is not symmetric")


class ProgramBuilder:
    """Incrementally assemble a :class:`ConicProgram`."""

    def __init__(self):
        self.var_names: list[str] = []
        self._var_index: dict[str, int] = {}
        self.objective = Lin()
        self.eq: list[tuple[Lin, str]] = []
        self.ineq: list[tuple[Lin, str]] = []
        self.soc: list[tuple[list[Lin], str]] = []
        self.rsoc: list[tuple[list[Lin], str, dict]] = []
        self.psd: list[tuple[list[list[Lin]], str, dict]] = []

    def add_var(self, name: str) -> int:
        if name in self._var_index:
            raise KeyError(f"duplicate variable {name}")
        k = len(self.var_names)
        self.var_names.append(name)
        self._var_index[name] = k
        return k

    def var(self, name: str) -> Lin:
        return Lin.var(self._var_index[name])

    def has_var(self, name: str) -> bool:
        return name in self._var_index

    def add_eq(self, lhs: Lin, rhs: Lin | float = 0.0, tag: str = "") -> None:
        self.eq.append((lhs - rhs, tag))

    def add_le(self, lhs: Lin, rhs: Lin | float = 0.0, tag: str = "") -> None:
        self.ineq.append((lhs - rhs, tag))

    def add_soc(self, entries: list[Lin], tag: str = "") -> None:
        self.soc.append((entries, tag))

    def add_rsoc(self, entries: list[Lin], tag: str = "", meta: dict | None = None) -> None:
        self.rsoc.append((entries, tag, meta or {}))

    def add_psd(self, matrix: list[list[Lin]], tag: str = "", meta: dict | None = None) -> None:
        self.psd.append((matrix, tag, meta or {}))

    def build(self, meta: dict | None = None) -> ConicProgram:
        n = len(self.var_names)
        c = np.zeros(n)
        for k, v in self.objective.terms.items():
            c[k] += v
        # rows are stored as (lhs - rhs); the constant moves to the right-hand side
        A_eq, k_eq = _rows_to_csr([r for r, _ in self.eq], n)
        A_in, k_in = _rows_to_csr([r for r, _ in self.ineq], n)
        b_eq, b_in = -k_eq, -k_in
        soc = [ConeBlock(*_rows_to_csr(e, n), tag=t) for e, t in self.soc]
        rsoc = [ConeBlock(*_rows_to_csr(e, n), tag=t, meta=m) for e, t, m in self.rsoc]
        psd = []
        for mat, tag, m in self.psd:
            d = len(mat)
            F, g = _rows_to_csr([mat[i][j] for i in range(d) for j in range(d)], n)
            psd.append(PSDBlock(d, F, g, tag=tag, meta=m))
        prog = ConicProgram(
            n_vars=n, var_names=list(self.var_names), c=c, c0=self.objective.const,
            A_eq=sp.csr_matrix(A_eq), b_eq=b_eq, A_in=sp.csr_matrix(A_in), b_in=b_in,
            soc=soc, rsoc=rsoc, psd=psd,
            eq_tags=[t for _, t in self.eq], in_tags=[t for _, t in self.ineq],
            meta=dict(meta or {}),
        )
        return prog


# ---------------------------------------------------------------------------
# Conic Benchmark Format (CBF, version 3) export / import


def write_cbf(prog: ConicProgram, stream: IO[str] | None = None) -> str:
    """Write ``prog`` in CBF text form; returns the text when ``stream`` is None.

    Constraint groups appear in the order: equalities (``L=``), inequalities
    as ``b - A x >= 0`` (``L+``), SOC (``Q``), rotated SOC (``QR``); PSD blocks
    follow as ``PSDCON`` entries (lower triangle).
    """
    out = stream or io.StringIO()
    w = out.write
    w("VER\n3\n\nOBJSENSE\nMIN\n\n")
    w(f"VAR\n{prog.n_vars} 1\nF {prog.n_vars}\n\n")

    groups = []  # (domain, rows A (csr), b)
    if prog.A_eq.shape[0]:
        groups.append(("L=", prog.A_eq, -prog.b_eq))
    if prog.A_in.shape[0]:
        groups.append(("L+", -prog.A_in, prog.b_in))
    for blk in prog.soc:
        groups.append(("Q", blk.F, blk.g))
    for blk in prog.rsoc:
        # CBF's QR is 2 x1 x2 >= ||rest||^2, matching the convention here
        groups.append(("QR", blk.F, blk.g))
    m = sum(a.shape[0] for _, a, _ in groups)
    if groups:
        w(f"CON\n{m} {len(groups)}\n")
        for dom, a, _ in groups:
            w(f"{dom} {a.shape[0]}\n")
        w("\n")
    if prog.psd:
        w(f"PSDCON\n{len(prog.psd)}\n")
        for blk in prog.psd:
            w(f"{blk.dim}\n")
        w("\n")

    obj = [(k, v) for k, v in enumerate(prog.c) if v != 0]
    if obj:
        w(f"OBJACOORD\n{len(obj)}\n")
        for k, v in obj:
            w(f"{k} {float(v)!r}\n")
        w("\n")
    if prog.c0 != 0:
        w(f"OBJBCOORD\n{float(prog.c0)!r}\n\n")

    acoord, bcoord, off = [], [], 0
    for _, a, b in groups:
        coo = a.tocoo()
        acoord += [(off + i, j, v) for i, j, v in zip(coo.row, coo.col, coo.data)]
        bcoord += [(off + i, v) for i, v in enumerate(b) if v != 0]
        off += a.shape[0]
    if acoord:
        w(f"ACOORD\n{len(acoord)}\n")
        for i, j, v in acoord:
            w(f"{i} {j} {float(v)!r}\n")
        w("\n")
    if bcoord:
        w(f"BCOORD\n{len(bcoord)}\n")
        for i, v in bcoord:
            w(f"{i} {float(v)!r}\n")
        w("\n")

    hc, dc = [], []
    for p, blk in enumerate(prog.psd):
        d = blk.dim
        coo = blk.F.tocoo()
        for r, j, v in zip(coo.row, coo.col, coo.data):
            a, b = divmod(int(r), d)
            if a >= b:
                hc.append((p, j, a, b, v))
        for r, v in enumerate(blk.g):
            a, b = divmod(r, d)
            if a >= b and v != 0:
                dc.append((p, a, b, v))
    if hc:
        w(f"HCOORD\n{len(hc)}\n")
        for p, j, a, b, v in hc:
            w(f"{p} {j} {a} {b} {float(v)!r}\n")
        w("\n")
    if dc:
        w(f"DCOORD\n{len(dc)}\n")
        for p, a, b, v in dc:
            w(f"{p} {a} {b} {float(v)!r}\n")
        w("\n")
    return out.getvalue() if stream is None else ""


def read_cbf(text: str) -> ConicProgram:
    """Parse CBF text produced by :func:`write_cbf` back into a program."""
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    pos = 0

    def nxt():
        nonlocal pos
        pos += 1
        return lines[pos - 1]

    n = 0
    cons: list[tuple[str, int]] = []
    psd_dims: list[int] = []
    c: dict[int, float] = {}
    c0 = 0.0
    acoord, bcoord, hcoord, dcoord = [], {}, [], []
    while pos < len(lines):
        key = nxt()
        if key == "VER":
            nxt()
        elif key == "OBJSENSE":
            if nxt() != "MIN":
                raise ValueError("only minimisation is supported")
        elif key == "VAR":
            n, k = map(int, nxt().split())
            for _ in range(k):
                dom, _cnt = nxt().split()
                if dom != "F":
                    raise ValueError("only free variables are supported")
        elif key == "CON":
            _, k = map(int, nxt().split())
            for _ in range(k):
                dom, cnt = nxt().split()
                cons.append((dom, int(cnt)))
        elif key == "PSDCON":
            psd_dims = [int(nxt()) for _ in range(int(nxt()))]
        elif key == "OBJACOORD":
            for _ in range(int(nxt())):
                j, v = nxt().split()
                c[int(j)] = float(v)
        elif key == "OBJBCOORD":
            c0 = float(nxt())
        elif key == "ACOORD":
            for _ in range(int(nxt())):
                i, j, v = nxt().split()
                acoord.append((int(i), int(j), float(v)))
        elif key == "BCOORD":
            for _ in range(int(nxt())):
                i, v = nxt().split()
                bcoord[int(i)] = float(v)
        elif key == "HCOORD":
            for _ in range(int(nxt())):
                p, j, a, b, v = nxt().split()
                hcoord.append((int(p), int(j), int(a), int(b), float(v)))
        elif key == "DCOORD":
            for _ in range(int(nxt())):
                p, a, b, v = nxt().split()
                dcoord.append((int(p), int(a), int(b), float(v)))
        else:
            raise ValueError(f"unsupported CBF section {key!r}")

    m = sum(cnt for _, cnt in cons)
    A = sp.csr_matrix(
        ([v for _, _, v in acoord], ([i for i, _, _ in acoord], [j for _, j, _ in acoord])),
        shape=(m, n),
    )
    b = np.zeros(m)
    for i, v in bcoord.items():
        b[i] = v
    A_eq = sp.csr_matrix((0, n))
    b_eq = np.zeros(0)
    A_in = sp.csr_matrix((0, n))
    b_in = np.zeros(0)
    soc, rsoc = [], []
    off = 0
    for dom, cnt in cons:
        a, bb = A[off:off + cnt], b[off:off + cnt]
        off += cnt
        if dom == "L=":
            A_eq, b_eq = sp.vstack([A_eq, a]).tocsr(), np.concatenate([b_eq, -bb])
        elif dom == "L+":
            A_in, b_in = sp.vstack([A_in, -a]).tocsr(), np.concatenate([b_in, bb])
        elif dom == "L-":
            A_in, b_in = sp.vstack([A_in, a]).tocsr(), np.concatenate([b_in, -bb])
        elif dom == "Q":
            soc.append(ConeBlock(sp.csr_matrix(a), bb.copy()))
        elif dom == "QR":
            rsoc.append(ConeBlock(sp.csr_matrix(a), bb.copy()))
        else:
            raise ValueError(f"unsupported cone domain {dom!r}")
    psd = []
    for p, d in enumerate(psd_dims):
        ri, ci, vals = [], [], []
        for pp, j, a, bb_, v in hcoord:
            if pp == p:
                for r in {a * d + bb_, bb_ * d + a}:
                    ri.append(r)
                    ci.append(j)
                    vals.append(v)
        g = np.zeros(d * d)
        for pp, a, bb_, v in dcoord:
            if pp == p:
                g[a * d + bb_] = g[bb_ * d + a] = v
        F = sp.csr_matrix((vals, (ri, ci)), shape=(d * d, n))
        psd.append(PSDBlock(d, F, g))
    cvec = np.zeros(n)
    for j, v in c.items():
        cvec[j] = v
    return ConicProgram(
        n_vars=n, var_names=[f"x{k}" for k in range(n)], c=cvec, c0=c0,
        A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in, soc=soc, rsoc=rsoc, psd=psd,
        eq_tags=[""] * A_eq.shape[0], in_tags=[""] * A_in.shape[0],
    )


def cone_histogram(prog: ConicProgram) -> Counter:
    return Counter({"soc": len(prog.soc), "rsoc": len(prog.rsoc), "psd": len(prog.psd)})
