"""Batch driver: build, solve and certify relaxations over a set of cases.

Produces two reports side by side: which (case, relaxation) pairs are
certified exact, and the optimality gap of each relaxation against a
reference AC-OPF objective.

    opfexact --case case9 --case case14 --relaxation SDR --relaxation TCR
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .certifier import (
    CertificationError,
    ExactnessCertificate,
    Tolerances,
    certify,
    load_reference_objectives,
    optimality_gap,
)
from .netmodel import BUNDLED_CASES, NetworkCase, load_case
from .relaxation import RelaxationKind, build
from .solver import LiftedSolution, SolverConfig, available_backends, solve

__all__ = ["RunSpec", "RunRecord", "run", "render", "parse_csv", "solve_and_certify", "main"]

log = logging.getLogger(__name__)

FORMATS = ("table", "csv", "json")
ALL_KINDS = tuple(k.value for k in RelaxationKind)


@dataclass(frozen=True)
class RunSpec:
    cases: tuple[str, ...]
    kinds: tuple[str, ...] = ALL_KINDS
    tolerances: Tolerances = field(default_factory=Tolerances)
    backend: str = "clarabel"
    fmt: str = "table"
    out: str | None = None
    reference_objectives: str | None = None
    jobs: int = 1

    def __post_init__(self):
        if not self.cases:
            raise ValueError("at least one case is required")
        if not self.kinds:
            raise ValueError("at least one relaxation kind is required")
        object.__setattr__(self, "kinds", tuple(RelaxationKind.parse(k).value for k in self.kinds))
        if self.fmt not in FORMATS:
            raise ValueError(f"unknown format {self.fmt!r}; choose from {FORMATS}")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")


@dataclass
class RunRecord:
    """Outcome of one (case, relaxation) pair.

    ``status`` is the solver status, or ``error`` when the pair could not be
    processed (``error`` then holds the message). ``measure`` is the eigenvalue
    ratio on the dense path and the largest tightness residual on the sparse
    path; ``cycle`` is the largest cycle residual (sparse path only).
    ``face`` says whether the certified point is the solver's first optimum
    (``central``) or the minimum-trace point of the optimal face.
    """

    case: str
    kind: str
    status: str
    objective: float | None = None
    gap: float | None = None
    verdict: str | None = None
    path: str | None = None
    measure: float | None = None
    cycle: float | None = None
    face: str | None = None
    iterations: int = 0
    wall_time: float = 0.0
    error: str | None = None

    @property
    def exact(self) -> bool:
        return self.verdict == "exact"

    @property
    def failed(self) -> bool:
        return self.status == "error"

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# pipeline


def solve_and_certify(case: NetworkCase, kind: str, cfg: SolverConfig | None = None,
                      tol: Tolerances | None = None) -> tuple[LiftedSolution, ExactnessCertificate | None, str]:
    """Solve one relaxation and certify its optimum.

    Interior-point solvers return the centre of the optimal face. When that
    point is not certified, the minimum-trace point of the same face is tried,
    since any rank-one optimum proves exactness. Returns the solution, its
    certificate (``None`` if the solve did not reach optimality) and which
    point was used.
    """
    cfg = cfg or SolverConfig()
    prog, _ = build(kind, case)
    sol = solve(prog, replace(cfg, face="none"))
    if not sol.optimal:
        return sol, None, "central"
    cert = certify(sol, case, tol)
    if cert.exact:
        return sol, cert, "central"
    alt = solve(prog, replace(cfg, face="min-trace"))
    if alt.optimal and alt.diagnostics.get("face_selection") == "min-trace":
        alt_cert = certify(alt, case, tol)
        if alt_cert.exact:
            return alt, alt_cert, "min-trace"
    return sol, cert, "central"


def _run_pair(source: str, kind: str, tol: Tolerances, backend: str,
              references: dict[str, float]) -> RunRecord:
    t0 = time.perf_counter()
    name = Path(source).stem if Path(source).suffix else source
    try:
        case = load_case(source)
        name = case.name
        sol, cert, face = solve_and_certify(case, kind, SolverConfig(backend=backend), tol)
    except (OSError, ValueError, CertificationError) as exc:
        return RunRecord(case=name, kind=kind, status="error", error=f"{type(exc).__name__}: {exc}",
                         wall_time=time.perf_counter() - t0)
    rec = RunRecord(case=name, kind=kind, status=sol.status, iterations=sol.iterations)
    if sol.optimal:
        rec.objective = sol.objective
        rec.gap = optimality_gap(sol.objective, references.get(name))
        rec.verdict, rec.path, rec.face = cert.verdict, cert.path, face
        ev = cert.evidence
        if cert.path == "dense-rank":
            rec.measure = ev["ratio"]
        else:
            rec.measure, rec.cycle = ev["max_tightness"], ev["max_cycle"]
    rec.wall_time = time.perf_counter() - t0
    return rec


def run(spec: RunSpec) -> tuple[list[RunRecord], str]:
    """Process every (case, kind) pair; failures become records, never exceptions."""
    references = load_reference_objectives(spec.reference_objectives)
    pairs = [(c, k) for c in spec.cases for k in spec.kinds]
    args = [(c, k, spec.tolerances, spec.backend, references) for c, k in pairs]
    if spec.jobs > 1 and len(pairs) > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            records = list(pool.map(_run_pair, *zip(*args)))
    else:
        records = [_run_pair(*a) for a in args]
    return records, render(records, spec.fmt)


# ---------------------------------------------------------------------------
# reports


def _fmt_gap(gap: float | None) -> str:
    return "n/a" if gap is None else f"{gap:.2f}"


def _grid(records: list[RunRecord]) -> tuple[list[str], list[str], dict[tuple[str, str], RunRecord]]:
    cases = list(dict.fromkeys(r.case for r in records))
    kinds = [k for k in ALL_KINDS if any(r.kind == k for r in records)]
    return cases, kinds, {(r.case, r.kind): r for r in records}


def _table(title: str, cases, kinds, cell) -> str:
    header = ["Case"] + [f"OPF-{k}" for k in kinds]
    rows = [[c] + [cell(c, k) for k in kinds] for c in cases]
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    line = lambda r: "  ".join(str(v).ljust(w) if i == 0 else str(v).center(w)
                               for i, (v, w) in enumerate(zip(r, widths))).rstrip()
    rule = "-" * len(line(header))
    return "\n".join([title, rule, line(header), rule] + [line(r) for r in rows] + [rule])


def render(records: list[RunRecord], fmt: str = "table") -> str:
    if not records:
        raise ValueError("nothing to render")
    if fmt == "json":
        return json.dumps([r.to_dict() for r in records], indent=2, sort_keys=True)
    if fmt == "csv":
        buf = io.StringIO()
        names = [f.name for f in fields(RunRecord)]
        w = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                        for k, v in r.to_dict().items()})
        return buf.getvalue()
    if fmt != "table":
        raise ValueError(f"unknown format {fmt!r}; choose from {FORMATS}")
    cases, kinds, by = _grid(records)

    def mark(c, k):
        r = by.get((c, k))
        if r is None:
            return ""
        if r.failed:
            return "ERR"
        return "✓" if r.exact else ""

    def gap(c, k):
        r = by.get((c, k))
        if r is None:
            return ""
        if r.failed or r.objective is None:
            return "ERR" if r.failed else r.status
        return _fmt_gap(r.gap)

    parts = [
        _table("Ex post exactness certificates (✓ = certified exact)", cases, kinds, mark),
        "",
        _table("Optimality gap (%) against the reference AC-OPF objective", cases, kinds, gap),
    ]
    errors = [r for r in records if r.failed]
    if errors:
        parts += ["", "Errors:"] + [f"  {r.case} {r.kind}: {r.error}" for r in errors]
    return "\n".join(parts) + "\n"


def parse_csv(text: str) -> list[RunRecord]:
    """Inverse of ``render(records, "csv")``."""
    types = {f.name: f.type for f in fields(RunRecord)}
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        kw = {}
        for k, v in row.items():
            t = types[k]
            if v == "":
                kw[k] = None if "None" in t else ({"int": 0, "float": 0.0}.get(t, ""))
            elif t.startswith("float"):
                kw[k] = float(v)
            elif t.startswith("int"):
                kw[k] = int(v)
            else:
                kw[k] = v
        out.append(RunRecord(**kw))
    return out


# ---------------------------------------------------------------------------
# command line


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="opfexact",
        description="Solve conic OPF relaxations and certify their exactness ex post.",
    )
    p.add_argument("--case", action="append", default=[], metavar="NAME_OR_PATH",
                   help="bundled case name or MATPOWER file (repeatable); default: the seven bundled cases")
    p.add_argument("--case-dir", action="append", default=[], metavar="DIR",
                   help="add every *.m file in DIR")
    p.add_argument("--relaxation", action="append", default=[], metavar="KIND",
                   help=f"one of {', '.join(ALL_KINDS)} (repeatable); default: all")
    d = Tolerances()
    p.add_argument("--eps-rank", type=float, default=d.eps_rank, help="eigenvalue-ratio threshold")
    p.add_argument("--eps-tight", type=float, default=d.eps_tight, help="2x2-minor tightness threshold")
    p.add_argument("--eps-cycle", type=float, default=d.eps_cycle, help="cycle phase threshold (radians)")
    p.add_argument("--backend", default="clarabel", help="clarabel or cvxopt")
    p.add_argument("--format", dest="fmt", choices=FORMATS, default="table")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.add_argument("--reference-objectives", metavar="JSON",
                   help="reference objectives file (default: bundled)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cases = list(args.case)
    for d in args.case_dir:
        found = sorted(str(p) for p in Path(d).glob("*.m"))
        if not found:
            print(f"opfexact: no .m files in {d}", file=sys.stderr)
            return 2
        cases += found
    if not cases:
        cases = list(BUNDLED_CASES)
    if args.backend.lower() not in available_backends():
        print(f"opfexact: backend {args.backend!r} unavailable; have {available_backends()}", file=sys.stderr)
        return 2
    try:
        spec = RunSpec(
            cases=tuple(cases),
            kinds=tuple(args.relaxation) or ALL_KINDS,
            tolerances=Tolerances(args.eps_rank, args.eps_tight, args.eps_cycle),
            backend=args.backend.lower(),
            fmt=args.fmt,
            out=args.out,
            reference_objectives=args.reference_objectives,
            jobs=args.jobs,
        )
        records, report = run(spec)
    except (ValueError, OSError) as exc:
        print(f"opfexact: {exc}", file=sys.stderr)
        return 2
    if spec.out:
        Path(spec.out).write_text(report)
    else:
        sys.stdout.write(report if report.endswith("\n") else report + "\n")
    return 1 if any(r.failed for r in records) else 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
