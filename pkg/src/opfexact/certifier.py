"""Ex post exactness certificates for lifted OPF relaxations.

Two routes decide whether a relaxed optimum ``W`` is the lift ``v v^H`` of an
AC-feasible point:

* dense: the full Hermitian matrix is numerically rank one;
* sparse: every line entry is a tight 2x2 minor and the entry phases sum to
  zero around every cycle, so a rank-one completion exists and is unique.

A certified solution is then turned back into bus voltages and checked against
the AC power-flow equations and the operating limits without reference to the
relaxation that produced it.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .graph import CycleBasis, PowerGraph, SpanningTree, fundamental_cycles, spanning_tree
from .netmodel import NetworkCase, branch_admittance
from .solver import LiftedSolution

__all__ = [
    "Tolerances",
    "CertificationError",
    "ExactnessCertificate",
    "TightnessReport",
    "CycleReport",
    "RecoveredOperatingPoint",
    "rank1_certificate",
    "tightness_check",
    "cycle_check",
    "sparse_certificate",
    "certify",
    "complete_rank1",
    "completion_mismatch",
    "recover_voltages",
    "branch_flows",
    "bus_injections",
    "optimality_gap",
    "load_reference_objectives",
    "wrap_angle",
]

HERMITIAN_TOL = 1e-9
GAP_NOISE = 1e-6  # relative objective difference treated as solver noise


class CertificationError(ValueError):
    """Input cannot be certified (malformed matrix, missing entries, failed checks)."""


@dataclass(frozen=True)
class Tolerances:
    eps_rank: float = 1e-6
    eps_tight: float = 1e-4
    eps_cycle: float = 1e-3  # radians
    eps_residual: float = 1e-5  # per-unit AC mismatch

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (isinstance(value, (int, float)) and value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be a positive finite number, got {value!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExactnessCertificate:
    """Verdict plus the numbers that justify it.

    ``evidence`` holds, for the dense path, the sorted eigenvalues and their
    ratio; for the sparse path, the line and cycle residuals with their argmax.
    """

    verdict: str  # exact | not-certified
    path: str  # dense-rank | sparse-completion
    kind: str = ""
    case: str = ""
    tolerances: dict = field(default_factory=dict)
    evidence: dict = field(default_factory=dict)

    @property
    def exact(self) -> bool:
        return self.verdict == "exact"

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "path": self.path,
            "kind": self.kind,
            "case": self.case,
            "tolerances": dict(self.tolerances),
            "evidence": _jsonable(self.evidence),
        }

    def to_json(self, **kwargs) -> str:
        kwargs.setdefault("sort_keys", True)
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, data: dict) -> ExactnessCertificate:
        return cls(
            verdict=data["verdict"],
            path=data["path"],
            kind=data.get("kind", ""),
            case=data.get("case", ""),
            tolerances=dict(data.get("tolerances", {})),
            evidence=dict(data.get("evidence", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> ExactnessCertificate:
        return cls.from_dict(json.loads(text))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def wrap_angle(a: float) -> float:
    """Map an angle onto (-pi, pi]."""
    w = math.remainder(a, 2 * math.pi)
    return math.pi if w == -math.pi else w


# ---------------------------------------------------------------------------
# dense path


def _check_hermitian(W) -> np.ndarray:
    W = np.asarray(W, dtype=complex)
    if W.ndim != 2 or W.shape[0] != W.shape[1] or W.shape[0] == 0:
        raise CertificationError(f"expected a nonempty square matrix, got shape {W.shape}")
    scale = float(np.max(np.abs(W)))
    if scale == 0.0:
        raise CertificationError("matrix is identically zero")
    asym = float(np.max(np.abs(W - W.conj().T)))
    if asym > HERMITIAN_TOL * max(scale, 1.0):
        raise CertificationError(f"matrix is not Hermitian (max |W - W^H| = {asym:.3g})")
    return 0.5 * (W + W.conj().T)


def rank1_certificate(W, tol: Tolerances | None = None, kind: str = "", case: str = "") -> ExactnessCertificate:
    """Numerical rank-one test on a dense Hermitian matrix.

    Exact iff the second-largest eigenvalue magnitude is at most ``eps_rank``
    times the largest eigenvalue, which must be positive.
    """
    tol = tol or Tolerances()
    W = _check_hermitian(W)
    if W[0, 0].real <= 0:
        raise CertificationError(f"W[0, 0] must be positive, got {W[0, 0].real:.3g}")
    lam = np.linalg.eigvalsh(W)  # ascending
    lmax = float(lam[-1])
    second = float(np.max(np.abs(lam[:-1]))) if lam.size > 1 else 0.0
    ratio = second / lmax if lmax > 0 else math.inf
    exact = lmax > 0 and ratio <= tol.eps_rank
    # a Hermitian rank-one matrix with a positive diagonal entry is PSD
    psd_consistent = bool(lam[0] >= -tol.eps_rank * lmax)
    if exact and not psd_consistent:  # pragma: no cover - implied by the ratio test
        raise AssertionError("rank-one verdict with a significantly negative eigenvalue")
    return ExactnessCertificate(
        verdict="exact" if exact else "not-certified",
        path="dense-rank",
        kind=kind,
        case=case,
        tolerances=tol.to_dict(),
        evidence={
            "eigenvalues": [float(x) for x in lam],
            "ratio": ratio,
            "lambda_max": lmax,
            "lambda_min": float(lam[0]),
            "psd_consistent": psd_consistent,
        },
    )


# ---------------------------------------------------------------------------
# sparse path


@dataclass
class TightnessReport:
    pairs: list[tuple[int, int]]
    residuals: np.ndarray
    tol: float

    @property
    def max(self) -> float:
        return float(self.residuals.max()) if self.residuals.size else 0.0

    @property
    def argmax(self) -> tuple[int, int] | None:
        return self.pairs[int(self.residuals.argmax())] if self.residuals.size else None

    @property
    def passed(self) -> bool:
        return self.max <= self.tol


@dataclass
class CycleReport:
    cycles: list[tuple[int, ...]]  # vertex walks, first == last
    residuals: np.ndarray
    tol: float
    diagnostics: list[str] = field(default_factory=list)

    @property
    def max(self) -> float:
        return float(self.residuals.max()) if self.residuals.size else 0.0

    @property
    def argmax(self) -> int | None:
        return int(self.residuals.argmax()) if self.residuals.size else None

    @property
    def passed(self) -> bool:
        return not self.diagnostics and self.max <= self.tol


def _entry(sol: LiftedSolution, i: int, j: int) -> complex:
    try:
        return complex(sol.W(i, j))
    except KeyError:
        raise CertificationError(f"solution has no entry W[{i}, {j}]") from None


def _line_pairs(case: NetworkCase) -> list[tuple[int, int]]:
    return sorted({(min(f, t), max(f, t)) for f, t in case.branch_ends()})


def _support_pairs(sol: LiftedSolution, case: NetworkCase, support: str) -> list[tuple[int, int]]:
    pairs = set(_line_pairs(case))
    if support == "auto":
        support = "lines+slack-row" if sol.support == "lines+slack-row" else "lines"
    if support == "lines+slack-row":
        s = case.slack_index
        pairs |= {(i, j) for i, j in sol.W_entries if i != j and s in (i, j)}
    elif support != "lines":
        raise ValueError(f"unknown support {support!r}")
    return sorted(pairs)


def tightness_check(sol: LiftedSolution, case: NetworkCase, tol: Tolerances | None = None,
                    pairs: list[tuple[int, int]] | None = None) -> TightnessReport:
    """Relative 2x2-minor residual ``|W_ii W_jj - |W_ij|^2| / max(W_ii W_jj, 1)`` per line."""
    tol = tol or Tolerances()
    pairs = _line_pairs(case) if pairs is None else list(pairs)
    res = np.empty(len(pairs))
    for k, (i, j) in enumerate(pairs):
        wii, wjj, wij = _entry(sol, i, i).real, _entry(sol, j, j).real, _entry(sol, i, j)
        res[k] = abs(wii * wjj - abs(wij) ** 2) / max(wii * wjj, 1.0)
    return TightnessReport(pairs, res, tol.eps_tight)


def cycle_check(sol: LiftedSolution, basis: CycleBasis, tol: Tolerances | None = None) -> CycleReport:
    """Wrapped phase sum ``|sum arg W_ab|`` along each basis cycle's vertex walk."""
    tol = tol or Tolerances()
    walks, res, diag = [], [], []
    for cyc in basis:
        walk = tuple(cyc.vertices)
        total = 0.0
        for a, b in zip(walk, walk[1:]):
            w = _entry(sol, a, b)
            if w == 0:
                diag.append(f"W[{a}, {b}] = 0 on cycle {walk}: phase undefined")
                total = math.nan
                break
            total += math.atan2(w.imag, w.real)
        walks.append(walk)
        res.append(math.inf if math.isnan(total) else abs(wrap_angle(total)))
    return CycleReport(walks, np.array(res, dtype=float), tol.eps_cycle, diag)


def _support_graph(case: NetworkCase, pairs) -> PowerGraph:
    """Graph of the in-service branches (parallel ones kept) plus any extra pairs."""
    lines = set(_line_pairs(case))
    extra = [p for p in pairs if p not in lines]
    return PowerGraph.from_edges(case.n, list(case.branch_ends()) + extra, root=case.slack_index)


def sparse_certificate(sol: LiftedSolution, case: NetworkCase, tol: Tolerances | None = None,
                       support: str = "auto") -> ExactnessCertificate:
    """Certify through the completion conditions on a sparse support.

    ``support="lines"`` uses the line entries only; ``"lines+slack-row"`` adds
    the slack-row entries a slack-anchored relaxation carries. ``"auto"`` picks
    from the solution's own support.
    """
    tol = tol or Tolerances()
    pairs = _support_pairs(sol, case, support)
    tight = tightness_check(sol, case, tol, pairs)
    g = _support_graph(case, pairs)
    basis = fundamental_cycles(g, spanning_tree(g, case.slack_index))
    cyc = cycle_check(sol, basis, tol)
    exact = tight.passed and cyc.passed
    return ExactnessCertificate(
        verdict="exact" if exact else "not-certified",
        path="sparse-completion",
        kind=sol.kind,
        case=case.name,
        tolerances=tol.to_dict(),
        evidence={
            "support": "lines+slack-row" if len(pairs) > len(_line_pairs(case)) else "lines",
            "max_tightness": tight.max,
            "argmax_tightness": list(tight.argmax) if tight.argmax else None,
            "tightness_residuals": tight.residuals,
            "n_cycles": len(cyc.cycles),
            "max_cycle": cyc.max,
            "argmax_cycle": list(cyc.cycles[cyc.argmax]) if cyc.argmax is not None else None,
            "cycle_residuals": cyc.residuals,
            "diagnostics": cyc.diagnostics,
        },
    )


def certify(sol: LiftedSolution, case: NetworkCase, tol: Tolerances | None = None) -> ExactnessCertificate:
    """Dense rank test for full-support solutions, completion conditions otherwise."""
    if not sol.optimal:
        raise CertificationError(f"cannot certify a solution with status {sol.status!r}")
    if sol.W_dense is not None:
        return rank1_certificate(sol.W_dense, tol, kind=sol.kind, case=case.name)
    return sparse_certificate(sol, case, tol)


# ---------------------------------------------------------------------------
# completion and recovery


def complete_rank1(sol: LiftedSolution, case: NetworkCase, tree: SpanningTree | None = None,
                   tol: Tolerances | None = None) -> np.ndarray:
    """Rank-one completion ``v v^H`` of a sparse solution that passes the checks.

    Magnitudes are ``sqrt(W_ii)``; angles start at 0 on the slack and follow
    ``theta_i - theta_j = arg W_ij`` down the spanning tree.
    """
    tol = tol or Tolerances()
    cert = sparse_certificate(sol, case, tol, support="lines")
    if not cert.exact:
        raise CertificationError(
            f"completion conditions fail (tightness {cert.evidence['max_tightness']:.3g}, "
            f"cycle {cert.evidence['max_cycle']:.3g})")
    if tree is None:
        tree = spanning_tree(PowerGraph.from_case(case), case.slack_index)
    theta = np.zeros(case.n)
    for u in tree.order:
        p = tree.parent[u]
        if p >= 0:
            theta[u] = theta[p] - np.angle(_entry(sol, p, u))
    mag = np.sqrt(np.maximum([_entry(sol, i, i).real for i in range(case.n)], 0.0))
    v = mag * np.exp(1j * theta)
    return np.outer(v, v.conj())


def completion_mismatch(Wc: np.ndarray, sol: LiftedSolution, case: NetworkCase) -> float:
    """Largest ``|Wc_ij - W_ij|`` over the diagonal and line entries."""
    pairs = _line_pairs(case) + [(i, i) for i in range(case.n)]
    return max(abs(Wc[i, j] - _entry(sol, i, j)) for i, j in pairs)


@dataclass
class RecoveredOperatingPoint:
    """Voltages read off a rank-one ``W`` and their AC consistency.

    ``residuals[i]`` is the complex per-unit injection recomputed from ``v``
    minus the injection the solver reported (generation less load).
    ``violations`` holds the largest per-unit excess over each operating limit
    (0 when satisfied). ``pg``/``qg`` are the generator outputs implied by
    ``v``, and ``objective`` is the cost at that dispatch.
    """

    v: np.ndarray
    residuals: np.ndarray
    violations: dict[str, float]
    pg: np.ndarray
    qg: np.ndarray
    objective: float

    @property
    def max_residual(self) -> float:
        return float(np.max(np.abs(self.residuals))) if self.residuals.size else 0.0

    @property
    def max_violation(self) -> float:
        return max(self.violations.values(), default=0.0)


def branch_flows(case: NetworkCase, v: np.ndarray) -> np.ndarray:
    """Complex flows ``(S_from, S_to)`` per branch from bus voltages, per-unit."""
    out = np.empty((len(case.branches), 2), dtype=complex)
    for k, (br, (f, t)) in enumerate(zip(case.branches, case.branch_ends())):
        y_ff, y_ft, y_tf, y_tt = branch_admittance(br)
        out[k, 0] = v[f] * np.conj(y_ff * v[f] + y_ft * v[t])
        out[k, 1] = v[t] * np.conj(y_tf * v[f] + y_tt * v[t])
    return out


def bus_injections(case: NetworkCase, v: np.ndarray) -> np.ndarray:
    """Net complex injection leaving each bus into lines and shunts, per-unit."""
    s = np.array([abs(v[i]) ** 2 * complex(b.gs, -b.bs) for i, b in enumerate(case.buses)])
    flows = branch_flows(case, v)
    for k, (f, t) in enumerate(case.branch_ends()):
        s[f] += flows[k, 0]
        s[t] += flows[k, 1]
    return s


def _voltage_from_matrix(W: np.ndarray, slack: int) -> np.ndarray:
    lam, U = np.linalg.eigh(W)
    v = math.sqrt(max(lam[-1], 0.0)) * U[:, -1]
    if abs(v[slack]) > 0:
        v = v * (abs(v[slack]) / v[slack])
        v[slack] = abs(v[slack])  # exactly zero angle
    return v


def recover_voltages(W, case: NetworkCase | None = None, sol: LiftedSolution | None = None,
                     tol: Tolerances | None = None, slack: int | None = None) -> RecoveredOperatingPoint:
    """Voltages ``sqrt(lambda) u`` from the dominant eigenpair, slack angle 0.

    With a ``case`` the flows are recomputed from ``v`` through the pi model
    and checked against the limits. With a ``sol`` as well, the residuals are
    taken against the solver's generation; otherwise against the generation
    that ``v`` itself implies, which makes them zero.
    """
    tol = tol or Tolerances()
    cert = rank1_certificate(W, tol)
    if not cert.exact:
        raise CertificationError(f"matrix is not numerically rank one (ratio {cert.evidence['ratio']:.3g})")
    W = _check_hermitian(W)
    if slack is None:
        slack = case.slack_index if case is not None else 0
    v = _voltage_from_matrix(W, slack)
    if case is None:
        return RecoveredOperatingPoint(v, np.zeros(len(v), dtype=complex), {}, np.empty(0), np.empty(0), math.nan)
    if len(v) != case.n:
        raise CertificationError(f"matrix dimension {len(v)} does not match {case.n} buses")

    load = np.array([complex(b.pd, b.qd) for b in case.buses])
    calc = bus_injections(case, v) + load  # generation each bus must supply
    ng = len(case.generators)
    if sol is not None and sol.pg is not None:
        pg0, qg0 = np.asarray(sol.pg, float), np.asarray(sol.qg, float)
    else:
        pg0, qg0 = np.zeros(ng), np.zeros(ng)
    reported = np.zeros(case.n, dtype=complex)
    for g, gen in enumerate(case.generators):
        reported[case.index[gen.bus]] += complex(pg0[g], qg0[g])
    residuals = calc - reported
    if sol is None:
        residuals = np.zeros(case.n, dtype=complex)

    # spread each bus's mismatch evenly over its generators
    pg, qg = pg0.copy(), qg0.copy()
    for i in range(case.n):
        gens = case.gens_at(i)
        if gens:
            d = (calc[i] - reported[i]) / len(gens)
            for g in gens:
                pg[g] += d.real
                qg[g] += d.imag
    unserved = [abs(calc[i] - reported[i]) for i in range(case.n) if not case.gens_at(i)]

    mag = np.abs(v)
    vmin = np.array([b.vmin for b in case.buses])
    vmax = np.array([b.vmax for b in case.buses])
    flows = branch_flows(case, v)
    line_excess = [max(abs(flows[k, 0]), abs(flows[k, 1])) - br.smax
                   for k, br in enumerate(case.branches) if br.smax is not None]
    pmin = np.array([gen.pmin for gen in case.generators])
    pmax = np.array([gen.pmax for gen in case.generators])
    qmin = np.array([gen.qmin for gen in case.generators])
    qmax = np.array([gen.qmax for gen in case.generators])

    def excess(values) -> float:
        values = list(values)
        return max(0.0, float(np.max(values))) if values else 0.0

    violations = {
        "voltage": excess(np.concatenate([vmin - mag, mag - vmax])),
        "balance_p": float(max((abs(r.real) for r in residuals), default=0.0)),
        "balance_q": float(max((abs(r.imag) for r in residuals), default=0.0)),
        "unserved": excess(unserved),
        "pg_limits": excess(np.concatenate([pmin - pg, pg - pmax])) if ng else 0.0,
        "qg_limits": excess(np.concatenate([qmin - qg, qg - qmax])) if ng else 0.0,
        "line_limits": excess(line_excess),
    }
    objective = float(sum(gen.cost.evaluate(pg[g] * case.base_mva) for g, gen in enumerate(case.generators)))
    return RecoveredOperatingPoint(v, residuals, violations, pg, qg, objective)


# ---------------------------------------------------------------------------
# optimality gap


def optimality_gap(relax_obj: float, reference_obj: float | None, noise: float = GAP_NOISE) -> float | None:
    """Percent gap ``100 (ref - relax) / ref``; ``None`` when no reference exists.

    Negative gaps smaller than ``noise`` (relative) are solver noise and
    reported as 0.
    """
    if reference_obj is None or (isinstance(reference_obj, float) and math.isnan(reference_obj)):
        return None
    if reference_obj <= 0:
        raise ValueError(f"reference objective must be positive, got {reference_obj!r}")
    rel = (reference_obj - relax_obj) / reference_obj
    if -noise <= rel < 0:
        rel = 0.0
    return 100.0 * rel


def load_reference_objectives(path: str | Path | None = None) -> dict[str, float]:
    """Reference AC-OPF objectives by case name.

    Accepts ``{"cases": {name: {"objective": x}}}`` or a flat ``{name: x}``.
    Defaults to the bundled file.
    """
    if path is None:
        text = resources.files("opfexact").joinpath("data/reference_objectives.json").read_text()
    else:
        text = Path(path).read_text()
    data = json.loads(text)
    entries = data.get("cases", data)
    out = {}
    for name, entry in entries.items():
        if name.startswith("_"):
            continue
        out[name] = float(entry["objective"] if isinstance(entry, dict) else entry)
    return out
