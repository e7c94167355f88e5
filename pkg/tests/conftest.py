import numpy as np
import pytest

from opfexact.cli import solve_and_certify
from opfexact.netmodel import BUNDLED_CASES, Branch, Bus, CostCurve, Generator, NetworkCase, load_case
from opfexact.relaxation import RelaxationKind, build
from opfexact.solver import SolverConfig, solve

KINDS = tuple(k.value for k in RelaxationKind)

TWO_BUS_M = """\
function mpc = two_bus
% minimal two-bus case: slack plus one load
mpc.version = '2';
mpc.baseMVA = 100;
%% bus data
mpc.bus = [
\t1\t3\t0\t0\t0\t0\t1\t1\t0\t230\t1\t1.05\t0.95;
\t2\t1\t90\t30\t0\t0\t1\t1\t0\t230\t1\t1.05\t0.95;
];
mpc.gen = [
\t1\t0\t0\t200\t-200\t1\t100\t1\t200\t0 ...
\t\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0;
];
mpc.branch = [
\t1\t2\t0.02\t0.1\t0.02\t0\t0\t0\t0\t0\t1\t-360\t360;
];
mpc.gencost = [
\t2\t0\t0\t3\t0.02\t10\t0;
];
"""


def _gen(bus, c2, c1, pmax=2.0, qlim=2.0):
    return Generator(bus, 0.0, pmax, -qlim, qlim, CostCurve("polynomial", (c2, c1, 0.0)))


def make_two_bus() -> NetworkCase:
    """Two generators, one lossy line, nothing binding except the voltage ceiling."""
    buses = (Bus(1, 0.95, 1.05, is_slack=True), Bus(2, 0.95, 1.05, pd=0.9, qd=0.3))
    return NetworkCase("two_bus", 100.0, buses, (Branch(1, 2, 0.02, 0.1, 0.02),),
                       (_gen(1, 0.02, 10), _gen(2, 0.03, 12)))


def make_triangle() -> NetworkCase:
    """Three buses on one cycle, one generator each."""
    buses = (Bus(1, 0.95, 1.05, is_slack=True), Bus(2, 0.95, 1.05, pd=0.5, qd=0.1),
             Bus(3, 0.95, 1.05, pd=0.8, qd=0.3))
    branches = (Branch(1, 2, 0.02, 0.12, 0.02), Branch(2, 3, 0.03, 0.15, 0.02), Branch(1, 3, 0.025, 0.1, 0.02))
    return NetworkCase("triangle", 100.0, buses, branches,
                       (_gen(1, 0.02, 10), _gen(2, 0.025, 11), _gen(3, 0.03, 12)))


def make_lossless_two_bus() -> NetworkCase:
    """y = 1/(0.1j) = -10j, no charging; only the slack generates."""
    buses = (Bus(1, 0.9, 1.1, is_slack=True), Bus(2, 0.9, 1.1, pd=0.5, qd=0.1))
    return NetworkCase("lossless", 100.0, buses, (Branch(1, 2, 0.0, 0.1),),
                       (_gen(1, 0.01, 10),))


@pytest.fixture
def two_bus():
    return make_two_bus()


@pytest.fixture
def triangle():
    return make_triangle()


@pytest.fixture
def lossless():
    return make_lossless_two_bus()


@pytest.fixture(scope="session")
def case9():
    return load_case("case9")


@pytest.fixture(scope="session")
def case14():
    return load_case("case14")


class _SolveCache:
    """Solve each (case, kind) pair at most once per test session."""

    def __init__(self):
        self.cases = {}
        self.plain = {}
        self.pipeline = {}

    def case(self, name):
        if name not in self.cases:
            self.cases[name] = load_case(name)
        return self.cases[name]

    def solve(self, name, kind):
        """Single-stage solve with default settings."""
        key = (name, kind)
        if key not in self.plain:
            self.plain[key] = solve(build(kind, self.case(name))[0], SolverConfig())
        return self.plain[key]

    def certified(self, name, kind):
        """``(solution, certificate, face)`` from the batch pipeline."""
        key = (name, kind)
        if key not in self.pipeline:
            self.pipeline[key] = solve_and_certify(self.case(name), kind)
        return self.pipeline[key]


@pytest.fixture(scope="session")
def solved():
    return _SolveCache()


@pytest.fixture(scope="session")
def bundled_cases():
    return BUNDLED_CASES


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
