"""Network data model and MATPOWER case parsing.

All quantities held by :class:`NetworkCase` are in per-unit on ``base_mva``
except cost curves, which keep MATPOWER's native units ($ against MW) so that
objectives are reported in the same currency as MATPOWER's own solver.
"""

from __future__ import annotations

import ast
import json
import math
import re
from collections.abc import Iterable
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO

import numpy as np

__all__ = [
    "Bus",
    "Branch",
    "Generator",
    "CostCurve",
    "NetworkCase",
    "CaseError",
    "MatpowerSyntaxError",
    "parse_matpower",
    "load_case",
    "branch_admittance",
    "is_radial",
]


class CaseError(ValueError):
    """Raised when a case is structurally invalid."""


class MatpowerSyntaxError(CaseError):
    """Raised for unparseable MATPOWER text; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class CostCurve:
    """Generator cost in $ as a function of active output in MW.

    ``kind == "polynomial"`` stores ``(c2, c1, c0)``.
    ``kind == "piecewise"`` stores a flat tuple ``(x1, y1, x2, y2, ...)``.
    """

    kind: str
    coefficients: tuple[float, ...]

    def __post_init__(self):
        if self.kind == "polynomial":
            if len(self.coefficients) != 3:
                raise CaseError("polynomial cost needs exactly (c2, c1, c0)")
            if self.coefficients[0] < 0:
                raise CaseError("quadratic cost coefficient must be nonnegative")
        elif self.kind == "piecewise":
            pts = self.points
            if len(pts) < 2:
                raise CaseError("piecewise-linear cost needs at least two points")
            xs = [x for x, _ in pts]
            if any(b <= a for a, b in zip(xs, xs[1:])):
                raise CaseError("piecewise-linear breakpoints must be strictly increasing")
            slopes = self.slopes
            if any(s2 < s1 - 1e-12 for s1, s2 in zip(slopes, slopes[1:])):
                raise CaseError("piecewise-linear cost must be convex (nondecreasing slopes)")
        else:
            raise CaseError(f"unknown cost kind {self.kind!r}")

    @property
    def points(self) -> list[tuple[float, float]]:
        c = self.coefficients
        return [(c[k], c[k + 1]) for k in range(0, len(c), 2)]

    @property
    def slopes(self) -> list[float]:
        pts = self.points
        return [(y2 - y1) / (x2 - x1) for (x1, y1), (x2, y2) in zip(pts, pts[1:])]

    def evaluate(self, p_mw: float) -> float:
        if self.kind == "polynomial":
            c2, c1, c0 = self.coefficients
            return c2 * p_mw**2 + c1 * p_mw + c0
        # convex piecewise-linear: max over the segment lines, extended beyond the ends
        pts = self.points
        return max(
            y1 + s * (p_mw - x1) for (x1, y1), s in zip(pts, self.slopes)
        )


@dataclass(frozen=True)
class Bus:
    id: int
    vmin: float
    vmax: float
    pd: float = 0.0
    qd: float = 0.0
    gs: float = 0.0
    bs: float = 0.0
    is_slack: bool = False

    def __post_init__(self):
        if self.id <= 0:
            raise CaseError(f"bus id must be positive, got {self.id}")
        if not (0 < self.vmin <= self.vmax):
            raise CaseError(f"bus {self.id}: need 0 < vmin <= vmax, got [{self.vmin}, {self.vmax}]")


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charge: float = 0.0
    tap: float = 1.0
    shift: float = 0.0
    smax: float | None = None

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise CaseError(f"branch {self.from_bus}-{self.to_bus} is a self loop")
        if self.r == 0 and self.x == 0:
            raise CaseError(f"branch {self.from_bus}-{self.to_bus} has zero impedance")
        if self.tap <= 0:
            raise CaseError(f"branch {self.from_bus}-{self.to_bus} has nonpositive tap")
        if self.smax is not None and self.smax <= 0:
            raise CaseError(f"branch {self.from_bus}-{self.to_bus}: smax must be positive or None")


@dataclass(frozen=True)
class Generator:
    bus: int
    pmin: float
    pmax: float
    qmin: float
    qmax: float
    cost: CostCurve

    def __post_init__(self):
        if self.pmin > self.pmax:
            raise CaseError(f"generator at bus {self.bus}: pmin > pmax")
        if self.qmin > self.qmax:
            raise CaseError(f"generator at bus {self.bus}: qmin > qmax")


@dataclass(frozen=True)
class NetworkCase:
    name: str
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    index: dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "generators", tuple(self.generators))
        if self.base_mva <= 0:
            raise CaseError("base_mva must be positive")
        index: dict[int, int] = {}
        for k, bus in enumerate(self.buses):
            if bus.id in index:
                raise CaseError(f"duplicate bus id {bus.id}")
            index[bus.id] = k
        object.__setattr__(self, "index", index)
        slack = [b.id for b in self.buses if b.is_slack]
        if len(slack) != 1:
            raise CaseError(f"expected exactly one slack bus, found {len(slack)}")
        for br in self.branches:
            for end in (br.from_bus, br.to_bus):
                if end not in index:
                    raise CaseError(f"branch {br.from_bus}-{br.to_bus} references unknown bus {end}")
        for g in self.generators:
            if g.bus not in index:
                raise CaseError(f"generator references unknown bus {g.bus}")

    @property
    def n(self) -> int:
        return len(self.buses)

    @property
    def slack_index(self) -> int:
        return next(k for k, b in enumerate(self.buses) if b.is_slack)

    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    def branch_ends(self) -> list[tuple[int, int]]:
        """Internal (from, to) indices of every branch, in branch order."""
        return [(self.index[br.from_bus], self.index[br.to_bus]) for br in self.branches]

    def gens_at(self, k: int) -> list[int]:
        bid = self.buses[k].id
        return [g for g, gen in enumerate(self.generators) if gen.bus == bid]

    # canonical JSON -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "base_mva": self.base_mva,
            "buses": [asdict(b) for b in self.buses],
            "branches": [asdict(b) for b in self.branches],
            "generators": [
                {**{k: v for k, v in asdict(g).items() if k != "cost"},
                 "cost": {"kind": g.cost.kind, "coefficients": list(g.cost.coefficients)}}
                for g in self.generators
            ],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kwargs)

    @classmethod
    def from_dict(cls, data: dict) -> NetworkCase:
        gens = []
        for g in data["generators"]:
            g = dict(g)
            cost = g.pop("cost")
            gens.append(Generator(cost=CostCurve(cost["kind"], tuple(cost["coefficients"])), **g))
        return cls(
            name=data["name"],
            base_mva=data["base_mva"],
            buses=tuple(Bus(**b) for b in data["buses"]),
            branches=tuple(Branch(**b) for b in data["branches"]),
            generators=tuple(gens),
        )

    @classmethod
    def from_json(cls, text: str) -> NetworkCase:
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# electrical helpers


def branch_admittance(branch: Branch) -> tuple[complex, complex, complex, complex]:
    """Pi-model two-port block ``(y_ff, y_ft, y_tf, y_tt)`` in per-unit.

    Currents relate to voltages as ``I_f = y_ff V_f + y_ft V_t`` and
    ``I_t = y_tf V_f + y_tt V_t``; the tap sits on the from side.
    """
    ys = 1.0 / complex(branch.r, branch.x)
    bc = 0.5j * branch.b_charge
    t = branch.tap * np.exp(1j * branch.shift)
    y_tt = ys + bc
    y_ff = y_tt / (branch.tap**2)
    y_ft = -ys / np.conj(t)
    y_tf = -ys / t
    return complex(y_ff), complex(y_ft), complex(y_tf), complex(y_tt)


def is_radial(case: NetworkCase) -> bool:
    """True iff the in-service network is a tree.

    Raises :class:`CaseError` for a disconnected network.
    """
    from .graph import PowerGraph, connected_components

    g = PowerGraph.from_case(case)
    comps = connected_components(g)
    if len(comps) > 1:
        raise CaseError(f"network is disconnected ({len(comps)} components)")
    return len(case.branches) == case.n - 1


# ---------------------------------------------------------------------------
# MATPOWER parsing

# MATLAB column indices (1-based) exposed by idx_bus / idx_brch / idx_gen / idx_cost
_IDX_NAMES = {
    "idx_bus": "PQ PV REF NONE BUS_I BUS_TYPE PD QD GS BS BUS_AREA VM VA BASE_KV ZONE VMAX VMIN "
               "LAM_P LAM_Q MU_VMAX MU_VMIN",
    "idx_brch": "F_BUS T_BUS BR_R BR_X BR_B RATE_A RATE_B RATE_C TAP SHIFT BR_STATUS PF QF PT QT "
                "MU_SF MU_ST ANGMIN ANGMAX MU_ANGMIN MU_ANGMAX",
    "idx_gen": "GEN_BUS PG QG QMAX QMIN VG MBASE GEN_STATUS PMAX PMIN PC1 PC2 QC1MIN QC1MAX "
               "QC2MIN QC2MAX RAMP_AGC RAMP_10 RAMP_30 RAMP_Q APF MU_PMAX MU_PMIN MU_QMAX MU_QMIN",
    "idx_cost": "PW_LINEAR POLYNOMIAL MODEL STARTUP SHUTDOWN NCOST COST",
}
_IDX_VALUES = {
    "idx_bus": [1, 2, 3, 4] + list(range(1, 18)),
    "idx_brch": list(range(1, 22)),
    "idx_gen": list(range(1, 26)),
    "idx_cost": [1, 2, 1, 2, 3, 4, 5],
}

_REQUIRED = ("bus", "gen", "branch", "gencost")
_FUNCS = {"sin": np.sin, "cos": np.cos, "tan": np.tan, "acos": np.arccos, "asin": np.arcsin,
          "atan": np.arctan, "sqrt": np.sqrt, "abs": np.abs, "exp": np.exp}


@dataclass
class _Statement:
    text: str
    line: int


def _split_statements(text: str) -> list[_Statement]:
    """Strip comments, join continuations and split MATLAB text into statements.

    Newlines and semicolons inside ``[...]``/``{...}`` are kept (they are row
    separators); at bracket depth 0 they terminate the statement.
    """
    out: list[_Statement] = []
    buf: list[str] = []
    depth = 0
    start_line = 1
    lines = text.splitlines()
    for lineno, raw in enumerate(lines, start=1):
        # strip comment, respecting single-quoted strings
        line = []
        in_str = False
        for ch in raw:
            if ch == "'" and (in_str or not line or not (line[-1].isalnum() or line[-1] in ")]}_.")):
                in_str = not in_str
            elif ch == "%" and not in_str:
                break
            line.append(ch)
        s = "".join(line)
        continued = False
        if "..." in s:
            s = s[: s.index("...")]
            continued = True
        if not buf:
            start_line = lineno
        for ch in s:
            if ch in "[{(":
                depth += 1
            elif ch in "]})":
                depth -= 1
                if depth < 0:
                    raise MatpowerSyntaxError(f"unbalanced {ch!r}", lineno)
            if ch == ";" and depth == 0:
                stmt = "".join(buf).strip()
                if stmt:
                    out.append(_Statement(stmt, start_line))
                buf = []
                start_line = lineno
                continue
            buf.append(ch)
        if continued:
            buf.append(" ")
        elif depth > 0:
            buf.append("\n")
        else:
            stmt = "".join(buf).strip()
            if stmt:
                out.append(_Statement(stmt, start_line))
            buf = []
    if depth != 0:
        raise MatpowerSyntaxError("unterminated bracket at end of file", len(lines))
    stmt = "".join(buf).strip()
    if stmt:
        out.append(_Statement(stmt, start_line))
    return out


_NUM_RE = re.compile(r"^[-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?$")


def _parse_matrix(body: str, line: int) -> np.ndarray:
    rows = []
    for row in re.split(r"[;\n]", body):
        row = row.strip().replace(",", " ")
        if not row:
            continue
        vals = []
        for tok in row.split():
            if _NUM_RE.match(tok):
                vals.append(float(tok))
            elif tok.lower() in ("inf", "+inf"):
                vals.append(math.inf)
            elif tok.lower() == "-inf":
                vals.append(-math.inf)
            else:
                raise MatpowerSyntaxError(f"non-numeric matrix entry {tok!r}", line)
        rows.append(vals)
    if not rows:
        return np.zeros((0, 0))
    width = max(len(r) for r in rows)
    # gencost rows may have different lengths; pad with zeros like MATLAB would require
    return np.array([r + [0.0] * (width - len(r)) for r in rows])


class _Evaluator:
    """Tiny interpreter for the column-rescaling statements found in case files."""

    def __init__(self, mats: dict[str, np.ndarray], scalars: dict[str, float]):
        self.mats = mats
        self.scalars = scalars
        self.env: dict[str, object] = {}

    def _translate(self, expr: str, line: int) -> ast.Expression:
        e = expr.replace("^", "**").replace(".*", "*").replace("./", "/")
        e = re.sub(r"\bmpc\.(\w+)\s*\(", r"__index__('\1', ", e)
        e = re.sub(r"\bmpc\.(\w+)", r"__field__('\1')", e)
        e = e.replace(":", "__ALL__")
        # MATLAB row vectors "[A B]" -> python lists
        e = re.sub(r"\[([^\[\]]*)\]", lambda m: "[" + ",".join(m.group(1).replace(",", " ").split()) + "]", e)
        try:
            tree = ast.parse(e, mode="eval")
        except SyntaxError as exc:
            raise MatpowerSyntaxError(f"cannot parse expression {expr!r}", line) from exc
        allowed = (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Constant,
                   ast.List, ast.Load, ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd)
        for node in ast.walk(tree):
            if not isinstance(node, allowed):
                raise MatpowerSyntaxError(f"unsupported construct in {expr!r}", line)
        return tree

    @staticmethod
    def _sel(arg, n):
        if isinstance(arg, str) and arg == "__ALL__":
            return slice(None)
        if isinstance(arg, list):
            return [int(a) - 1 for a in arg]
        return int(arg) - 1

    def eval(self, expr: str, line: int):
        tree = self._translate(expr, line)

        def index(name, rows, cols):
            m = self._mat(name, line)
            return m[self._sel(rows, m.shape[0]), self._sel(cols, m.shape[1])]

        def fld(name):
            if name in self.mats:
                return self.mats[name]
            if name in self.scalars:
                return self.scalars[name]
            raise MatpowerSyntaxError(f"unknown field mpc.{name}", line)

        ns = {"__index__": index, "__field__": fld, "__ALL__": "__ALL__", "pi": math.pi, **_FUNCS}
        ns.update(self.env)
        try:
            return eval(compile(tree, "<matpower>", "eval"), {"__builtins__": {}}, ns)
        except MatpowerSyntaxError:
            raise
        except Exception as exc:
            raise MatpowerSyntaxError(f"cannot evaluate {expr!r}: {exc}", line) from exc

    def _mat(self, name: str, line: int) -> np.ndarray:
        if name not in self.mats:
            raise MatpowerSyntaxError(f"mpc.{name} used before definition", line)
        return self.mats[name]

    def assign_index(self, name: str, args: str, rhs, line: int):
        parts = _split_top(args)
        if len(parts) != 2:
            raise MatpowerSyntaxError("only 2-D indexing is supported", line)
        rows, cols = (self.eval(p, line) for p in parts)
        m = self._mat(name, line)
        m[self._sel(rows, m.shape[0]), self._sel(cols, m.shape[1])] = rhs


def _split_top(s: str) -> list[str]:
    parts, depth, cur = [], 0, []
    for ch in s:
        if ch in "([{":
            depth += 1
        elif ch in ")]}":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    parts.append("".join(cur))
    return [p.strip() for p in parts]


def _interpret(text: str) -> tuple[str | None, dict[str, np.ndarray], dict[str, float]]:
    name = None
    mats: dict[str, np.ndarray] = {}
    scalars: dict[str, float] = {}
    ev = _Evaluator(mats, scalars)
    for st in _split_statements(text):
        s = st.text
        m = re.match(r"^function\s+(\w+)\s*=\s*(\w+)$", s)
        if m:
            name = m.group(2)
            continue
        if s in ("end", "return"):
            continue
        m = re.match(r"^mpc\.(\w+)\s*=\s*\[(.*)\]$", s, re.S)
        if m:
            mats[m.group(1)] = _parse_matrix(m.group(2), st.line)
            continue
        m = re.match(r"^mpc\.(\w+)\s*=\s*\{(.*)\}$", s, re.S)
        if m:  # cell arrays (bus names etc.) carry no model data
            continue
        m = re.match(r"^mpc\.(\w+)\s*=\s*'([^']*)'$", s)
        if m:
            scalars[m.group(1)] = m.group(2)
            continue
        m = re.match(r"^mpc\.(\w+)\s*\((.*)\)\s*=\s*(.+)$", s, re.S)
        if m:
            ev.assign_index(m.group(1), m.group(2), ev.eval(m.group(3), st.line), st.line)
            continue
        m = re.match(r"^mpc\.(\w+)\s*=\s*(.+)$", s, re.S)
        if m:
            val = ev.eval(m.group(2), st.line)
            if isinstance(val, np.ndarray):
                mats[m.group(1)] = val
            else:
                scalars[m.group(1)] = float(val)
            continue
        m = re.match(r"^\[([\w\s,]+)\]\s*=\s*(idx_\w+)$", s, re.S)
        if m:
            names = m.group(1).replace(",", " ").split()
            if m.group(2) not in _IDX_NAMES:
                raise MatpowerSyntaxError(f"unknown index function {m.group(2)}", st.line)
            table = dict(zip(_IDX_NAMES[m.group(2)].split(), _IDX_VALUES[m.group(2)]))
            for nm in names:
                if nm not in table:
                    raise MatpowerSyntaxError(f"{m.group(2)} does not define {nm}", st.line)
                ev.env[nm] = table[nm]
            continue
        m = re.match(r"^([A-Za-z]\w*)\s*=\s*(.+)$", s, re.S)
        if m:
            ev.env[m.group(1)] = ev.eval(m.group(2), st.line)
            continue
        raise MatpowerSyntaxError(f"unrecognised statement: {s[:60]!r}", st.line)
    return name, mats, scalars


def _cost_from_row(row: np.ndarray, line_hint: str) -> CostCurve:
    model, ncost = int(row[0]), int(row[3])
    data = [float(v) for v in row[4:4 + (2 * ncost if model == 1 else ncost)]]
    if model == 2:
        # drop leading zero high-order terms, then pad to (c2, c1, c0)
        while len(data) > 3 and data[0] == 0:
            data = data[1:]
        if len(data) > 3:
            raise CaseError(f"{line_hint}: polynomial costs above degree 2 are not supported")
        data = [0.0] * (3 - len(data)) + data
        return CostCurve("polynomial", tuple(data))
    if model == 1:
        return CostCurve("piecewise", tuple(data))
    raise CaseError(f"{line_hint}: unknown cost model {model}")


def _case_from_matrices(name: str, mats: dict[str, np.ndarray], base: float) -> NetworkCase:
    bus_m, gen_m, br_m, cost_m = (mats[k] for k in _REQUIRED)
    buses = []
    for row in bus_m:
        btype = int(row[1])
        if btype == 4:
            continue  # isolated bus
        buses.append(Bus(
            id=int(row[0]), vmin=float(row[12]), vmax=float(row[11]),
            pd=float(row[2]) / base, qd=float(row[3]) / base, gs=float(row[4]) / base, bs=float(row[5]) / base,
            is_slack=btype == 3,
        ))
    ids = [b.id for b in buses]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise CaseError(f"duplicate bus id {dup}")
    known = set(int(r[0]) for r in bus_m)

    branches = []
    for k, row in enumerate(br_m):
        f, t = int(row[0]), int(row[1])
        for end in (f, t):
            if end not in known:
                raise CaseError(f"branch {k + 1} ({f}-{t}) references unknown bus {end}")
        if br_m.shape[1] > 10 and row[10] == 0:
            continue
        rate = float(row[5])
        branches.append(Branch(
            from_bus=f, to_bus=t, r=float(row[2]), x=float(row[3]), b_charge=float(row[4]),
            tap=float(row[8]) if row[8] != 0 else 1.0,
            shift=math.radians(float(row[9])),
            smax=rate / base if rate > 0 else None,
        ))

    ng_all = gen_m.shape[0]
    if cost_m.shape[0] < ng_all:
        raise CaseError(f"gencost has {cost_m.shape[0]} rows for {ng_all} generators")
    gens = []
    for k, row in enumerate(gen_m):
        if int(row[0]) not in known:
            raise CaseError(f"generator {k + 1} references unknown bus {int(row[0])}")
        if row[7] <= 0:
            continue
        cost = _cost_from_row(cost_m[k], f"gencost row {k + 1}")
        gens.append(Generator(
            bus=int(row[0]), pmin=float(row[9]) / base, pmax=float(row[8]) / base,
            qmin=float(row[4]) / base, qmax=float(row[3]) / base, cost=cost,
        ))
    return NetworkCase(name=name, base_mva=base, buses=tuple(buses),
                       branches=tuple(branches), generators=tuple(gens))


def parse_matpower(source: str | IO[str], name: str | None = None) -> NetworkCase:
    """Parse MATPOWER ``.m`` text (or a text stream) into a per-unit :class:`NetworkCase`.

    Besides the matrix literals, the handful of MATLAB statements that case
    files use for unit conversion (``idx_bus`` column names, scalar
    assignments, ``mpc.bus(:, [PD QD]) = ... / 1e3`` style column updates) are
    interpreted. Anything else is rejected with a line number.
    """
    text = source if isinstance(source, str) else source.read()
    fname, mats, scalars = _interpret(text)
    for key in _REQUIRED:
        if key not in mats:
            raise CaseError(f"missing required matrix mpc.{key}")
    if "baseMVA" not in scalars:
        raise CaseError("missing mpc.baseMVA")
    return _case_from_matrices(name or fname or "unnamed", mats, float(scalars["baseMVA"]))


_CASE_DIR = Path(__file__).parent / "data" / "cases"

BUNDLED_CASES = ("case9", "case14", "case22", "case33bw", "case39", "case69", "case141")


def bundled_case_path(name: str) -> Path:
    return _CASE_DIR / f"{name}.m"


def load_case(name_or_path: str | Path) -> NetworkCase:
    """Load a bundled case by name (``"case9"``) or any MATPOWER file path."""
    p = Path(name_or_path)
    if not p.suffix and not p.exists():
        p = bundled_case_path(str(name_or_path))
    if not p.exists():
        raise FileNotFoundError(f"no such case: {name_or_path}")
    with p.open() as fh:
        return parse_matpower(fh, name=p.stem)


def bundled_cases() -> list[str]:
    return sorted(p.stem for p in _CASE_DIR.glob("*.m"))


def total_load(case: NetworkCase) -> complex:
    return sum(complex(b.pd, b.qd) for b in case.buses)


def buses_by_index(case: NetworkCase, ids: Iterable[int]) -> list[int]:
    return [case.index[i] for i in ids]
