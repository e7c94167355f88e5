"""Conic relaxations (SDR, SOCR, TCR, STCR) of AC optimal power flow.

Every relaxation shares the lifted linear model built by :func:`build_common`:
the Hermitian matrix ``W`` stands in for ``v v^H``, branch flows are linear in
``W`` through the pi-model, and bounds on voltage magnitudes become bounds on
``W_ii``. The relaxations differ only in which conic constraints tie the
entries of ``W`` together.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .conic import ConicProgram, HermitianBlock, Lin, ProgramBuilder, ZERO, realify
from .netmodel import CaseError, NetworkCase, branch_admittance

__all__ = [
    "RelaxationKind",
    "LiftedVariableIndex",
    "BuildReport",
    "build_common",
    "build",
    "realify_psd_block",
    "line_pairs",
]


class RelaxationKind(str, enum.Enum):
    SDR = "SDR"
    SOCR = "SOCR"
    TCR = "TCR"
    STCR = "STCR"

    @classmethod
    def parse(cls, text: str) -> RelaxationKind:
        key = text.strip().upper()
        for prefix in ("OPF-", "OPF_"):
            if key.startswith(prefix):
                key = key[len(prefix):]
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown relaxation {text!r}; choose from {[k.value for k in cls]}") from None


def line_pairs(case: NetworkCase) -> list[tuple[int, int]]:
    """Distinct unordered bus pairs ``(i, j)``, ``i < j``, joined by some branch."""
    seen = []
    got = set()
    for f, t in case.branch_ends():
        key = (min(f, t), max(f, t))
        if key not in got:
            got.add(key)
            seen.append(key)
    return seen


@dataclass
class LiftedVariableIndex:
    """Where each lifted entry lives in the real variable vector.

    ``diag[i]`` indexes the real ``W_ii``; ``offdiag[(i, j)]`` (``i < j``)
    holds ``(re, im)`` indices of ``W_ij``; ``v`` holds ``(re, im)`` indices of
    voltage entries (``im`` is ``None`` at the slack, whose angle is pinned).
    """

    n: int
    diag: dict[int, int] = field(default_factory=dict)
    offdiag: dict[tuple[int, int], tuple[int, int]] = field(default_factory=dict)
    v: dict[int, tuple[int, int | None]] = field(default_factory=dict)

    @property
    def support(self) -> list[tuple[int, int]]:
        return sorted(self.offdiag)

    def W(self, i: int, j: int) -> tuple[Lin, Lin]:
        """(Re, Im) affine expressions of ``W_ij`` for any ordered pair."""
        if i == j:
            return Lin.var(self.diag[i]), ZERO
        a, b = (i, j) if i < j else (j, i)
        re, im = self.offdiag[(a, b)]
        return Lin.var(re), Lin.var(im, 1.0 if i < j else -1.0)

    def V(self, i: int) -> tuple[Lin, Lin]:
        re, im = self.v[i]
        return Lin.var(re), (ZERO if im is None else Lin.var(im))


@dataclass
class BuildReport:
    kind: RelaxationKind
    case_name: str
    counts: dict[str, int]
    tags: dict[str, list[str]]
    support: str

    def summary(self) -> str:
        c = self.counts
        return (f"{self.case_name}/{self.kind.value}: {c['variables']} vars, "
                f"{c['eq_rows']} eq, {c['ineq_rows']} ineq, {c['soc']} soc, "
                f"{c['rsoc']} rsoc, {c['psd']} psd (max dim {c['psd_max_dim']})")


def _cmul(a: complex, re: Lin, im: Lin) -> tuple[Lin, Lin]:
    """Complex constant times complex affine expression."""
    return a.real * re - a.imag * im, a.real * im + a.imag * re


def _register(case: NetworkCase, kind: RelaxationKind, b: ProgramBuilder) -> LiftedVariableIndex:
    n = case.n
    idx = LiftedVariableIndex(n)
    ids = case.bus_ids()
    for i in range(n):
        idx.diag[i] = b.add_var(f"W[{ids[i]},{ids[i]}]")
    pairs = line_pairs(case)
    s = case.slack_index
    if kind is RelaxationKind.SDR:
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    elif kind is RelaxationKind.STCR:
        extra = []
        have = set(pairs)
        for i, j in line_pairs(case):
            for k in (i, j):
                key = (min(s, k), max(s, k))
                if k != s and key not in have:
                    have.add(key)
                    extra.append(key)
        pairs = pairs + extra
    for i, j in pairs:
        re = b.add_var(f"ReW[{ids[i]},{ids[j]}]")
        im = b.add_var(f"ImW[{ids[i]},{ids[j]}]")
        idx.offdiag[(i, j)] = (re, im)
    if kind is RelaxationKind.TCR:
        for i in range(n):
            re = b.add_var(f"Rev[{ids[i]}]")
            im = None if i == s else b.add_var(f"Imv[{ids[i]}]")
            idx.v[i] = (re, im)
    return idx


def _add_range(b: ProgramBuilder, lo: float, expr: Lin, hi: float, label: str) -> None:
    """``lo <= expr <= hi``; a degenerate range becomes an equality so the
    feasible set keeps a relative interior."""
    if lo == hi:
        b.add_eq(expr, lo, tag=f"{label} fixed")
        return
    if math.isfinite(lo):
        b.add_le(lo, expr, tag=f"{label} min")
    if math.isfinite(hi):
        b.add_le(expr, hi, tag=f"{label} max")


def build_common(case: NetworkCase, idx: LiftedVariableIndex, b: ProgramBuilder) -> None:
    """Emit the constraints shared by every relaxation into ``b``.

    Branch flows (both ends) from the pi-model in ``W``, nodal balance with
    shunts, voltage and generator bounds, apparent-power cones and the cost
    epigraph.
    """
    ids = case.bus_ids()
    base = case.base_mva

    for i, bus in enumerate(case.buses):
        w = Lin.var(idx.diag[i])
        _add_range(b, bus.vmin**2, w, bus.vmax**2, f"v bus {bus.id}")

    flows_p: list[list[Lin]] = [[] for _ in range(case.n)]
    flows_q: list[list[Lin]] = [[] for _ in range(case.n)]
    for k, (br, (f, t)) in enumerate(zip(case.branches, case.branch_ends())):
        y_ff, y_ft, y_tf, y_tt = branch_admittance(br)
        label = f"branch {k + 1} ({ids[f]}-{ids[t]})"
        for side, (a, bb, fr, to, yd, yo) in {
            "f": (f, t, f, t, y_ff, y_ft),
            "t": (t, f, t, f, y_tt, y_tf),
        }.items():
            # S = conj(y_dd) W_aa + conj(y_do) W_ab
            wr, wi = idx.W(a, a)
            sr, si = _cmul(np.conj(yd), wr, wi)
            wr, wi = idx.W(a, bb)
            tr, ti = _cmul(np.conj(yo), wr, wi)
            p = Lin.var(b.add_var(f"p{side}[{k + 1}]"))
            q = Lin.var(b.add_var(f"q{side}[{k + 1}]"))
            b.add_eq(p, sr + tr, tag=f"flow-p-{side} {label}")
            b.add_eq(q, si + ti, tag=f"flow-q-{side} {label}")
            flows_p[a].append(p)
            flows_q[a].append(q)
            if br.smax is not None:
                b.add_soc([Lin(const=br.smax), p, q], tag=f"smax-{side} {label}")

    gen_p, gen_q = [], []
    for g, gen in enumerate(case.generators):
        if not (math.isfinite(gen.pmax) and math.isfinite(gen.pmin)):
            raise CaseError(f"generator {g + 1} at bus {gen.bus} has unbounded output")
        p = Lin.var(b.add_var(f"pg[{g + 1}]"))
        q = Lin.var(b.add_var(f"qg[{g + 1}]"))
        gen_p.append(p)
        gen_q.append(q)
        _add_range(b, gen.pmin, p, gen.pmax, f"p gen {g + 1}")
        _add_range(b, gen.qmin, q, gen.qmax, f"q gen {g + 1}")
        _add_cost(b, g, gen, p, base)

    for i, bus in enumerate(case.buses):
        w = Lin.var(idx.diag[i])
        inj_p = sum((gen_p[g] for g in case.gens_at(i)), Lin()) - bus.pd - bus.gs * w
        inj_q = sum((gen_q[g] for g in case.gens_at(i)), Lin()) - bus.qd + bus.bs * w
        b.add_eq(inj_p, sum(flows_p[i], Lin()), tag=f"balance-p bus {bus.id}")
        b.add_eq(inj_q, sum(flows_q[i], Lin()), tag=f"balance-q bus {bus.id}")


def _add_cost(b: ProgramBuilder, g: int, gen, p: Lin, base: float) -> None:
    cost = gen.cost
    if cost.kind == "polynomial":
        c2, c1, c0 = cost.coefficients
        b.objective = b.objective + (c1 * base) * p + c0
        if c2 > 0:
            t = Lin.var(b.add_var(f"cost[{g + 1}]"))
            b.objective = b.objective + t
            # t >= c2 (base p)^2  <=>  2 * t * 0.5 >= (sqrt(c2) base p)^2
            b.add_rsoc([t, Lin(const=0.5), (math.sqrt(c2) * base) * p], tag=f"cost gen {g + 1}")
    else:
        t = Lin.var(b.add_var(f"cost[{g + 1}]"))
        b.objective = b.objective + t
        pts = cost.points
        for s, ((x1, y1), slope) in enumerate(zip(pts, cost.slopes)):
            # y1 + slope * (base p - x1) <= t
            b.add_le((slope * base) * p + (y1 - slope * x1), t, tag=f"cost gen {g + 1} seg {s + 1}")


def realify_psd_block(block):
    """Real symmetric embedding of a complex Hermitian block (see :func:`opfexact.conic.realify`)."""
    return realify(block)


def _hermitian(entries: list[list[tuple[Lin, Lin]]]) -> HermitianBlock:
    return HermitianBlock([[e[0] for e in row] for row in entries],
                          [[e[1] for e in row] for row in entries])


def _line_scale(case: NetworkCase) -> dict[tuple[int, int], float]:
    """Typical voltage-difference scale per line pair, ``|y_series|^(-1/2)``.

    Only a conditioning hint for solvers; it never changes the feasible set.
    """
    out: dict[tuple[int, int], float] = {}
    for br, (f, t) in zip(case.branches, case.branch_ends()):
        key = (min(f, t), max(f, t))
        y = abs(1 / complex(br.r, br.x)) if (br.r or br.x) else 1.0
        out[key] = min(out.get(key, 1.0), 1 / math.sqrt(max(y, 1.0)))
    return out


def _block_lines(buses: list[int | None], scale: dict[tuple[int, int], float]) -> list[tuple[int, int, float]]:
    """Line pairs among a block's buses as ``(pos_i, pos_j, delta)``."""
    out = []
    for a, bi in enumerate(buses):
        for c in range(a + 1, len(buses)):
            bj = buses[c]
            if bi is None or bj is None:
                continue
            key = (min(bi, bj), max(bi, bj))
            if key in scale:
                out.append((a, c, scale[key]))
    return out


def build(kind: RelaxationKind | str, case: NetworkCase) -> tuple[ConicProgram, BuildReport]:
    """Assemble ``kind`` for ``case`` as a real conic program."""
    kind = RelaxationKind.parse(kind) if isinstance(kind, str) else kind
    if kind is RelaxationKind.STCR and not any(bus.is_slack for bus in case.buses):
        raise CaseError("STCR needs a slack bus")
    b = ProgramBuilder()
    idx = _register(case, kind, b)
    build_common(case, idx, b)
    ids = case.bus_ids()
    s = case.slack_index
    scale = _line_scale(case)

    if kind is RelaxationKind.SDR:
        n = case.n
        block = _hermitian([[idx.W(i, j) for j in range(n)] for i in range(n)])
        buses = list(range(n))
        b.add_psd(realify(block), tag="W psd",
                  meta={"complex": True, "buses": buses, "lines": _block_lines(buses, scale)})
        support = "full"
    elif kind is RelaxationKind.SOCR:
        for i, j in line_pairs(case):
            re, im = idx.W(i, j)
            b.add_rsoc([Lin.var(idx.diag[i]), Lin.var(idx.diag[j]), math.sqrt(2) * re, math.sqrt(2) * im],
                       tag=f"minor {ids[i]}-{ids[j]}", meta={"minor_scale": scale[(i, j)]})
        support = "lines"
    elif kind is RelaxationKind.TCR:
        one = (Lin(const=1.0), ZERO)
        for i, j in line_pairs(case):
            vi, vj = idx.V(i), idx.V(j)
            # first row holds conj(v): [1, v_i^*, v_j^*]
            ci, cj = (vi[0], -vi[1]), (vj[0], -vj[1])
            block = _hermitian([
                [one, ci, cj],
                [vi, idx.W(i, i), idx.W(i, j)],
                [vj, idx.W(j, i), idx.W(j, j)],
            ])
            b.add_psd(realify(block), tag=f"tcr {ids[i]}-{ids[j]}",
                      meta={"complex": True, "buses": [None, i, j],
                            "lines": _block_lines([None, i, j], scale)})
        slack = case.buses[s]
        vre = idx.V(s)[0]
        b.add_le(Lin.var(idx.diag[s]), (slack.vmin + slack.vmax) * vre - slack.vmin * slack.vmax,
                 tag=f"slack cut bus {slack.id}")
        support = "lines"
    else:  # STCR
        for i, j in line_pairs(case):
            if s in (i, j):
                k = j if i == s else i
                re, im = idx.W(s, k)
                b.add_rsoc([Lin.var(idx.diag[s]), Lin.var(idx.diag[k]), math.sqrt(2) * re, math.sqrt(2) * im],
                           tag=f"stcr {ids[i]}-{ids[j]}", meta={"minor_scale": scale[(i, j)]})
                continue
            order = (s, i, j)
            block = _hermitian([[idx.W(a, c) for c in order] for a in order])
            b.add_psd(realify(block), tag=f"stcr {ids[i]}-{ids[j]}",
                      meta={"complex": True, "buses": list(order),
                            "lines": _block_lines(list(order), scale)})
        support = "lines+slack-row"

    prog = b.build(meta={"kind": kind.value, "case": case.name, "n": case.n, "index": idx,
                         "support": support})
    prog.validate()
    tags = {"eq": prog.eq_tags, "ineq": prog.in_tags,
            "soc": [c.tag for c in prog.soc], "rsoc": [c.tag for c in prog.rsoc],
            "psd": [c.tag for c in prog.psd]}
    report = BuildReport(kind, case.name, prog.counts(), tags, support)
    return prog, report
