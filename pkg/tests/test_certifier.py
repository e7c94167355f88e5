import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opfexact.certifier import (
    CertificationError,
    ExactnessCertificate,
    Tolerances,
    branch_flows,
    bus_injections,
    certify,
    complete_rank1,
    completion_mismatch,
    cycle_check,
    load_reference_objectives,
    optimality_gap,
    rank1_certificate,
    recover_voltages,
    sparse_certificate,
    tightness_check,
    wrap_angle,
)
from conftest import make_two_bus
from opfexact.graph import PowerGraph, fundamental_cycles, spanning_tree
from opfexact.netmodel import BUNDLED_CASES, Branch, Bus
from opfexact.relaxation import build
from opfexact.solver import LiftedSolution, solve

# brute-force grid optima (step 1e-3) of the desk-scale fixtures, from tests/oracles.grid_search
GRID_OPTIMA = {
    "two_bus": (1061.693563313287, [1.05, 1.038], [0.0, -0.065]),
    "triangle": (1538.3411823290178, [1.05, 1.046, 1.04], [0.0, -0.026, -0.044]),
}


def partial_solution(W, pairs, kind="SOCR", support="lines"):
    """A sparse-support solution holding the diagonal of ``W`` and the given pairs."""
    n = W.shape[0]
    entries = {(i, i): complex(W[i, i].real) for i in range(n)}
    for i, j in pairs:
        a, b = min(i, j), max(i, j)
        entries[(a, b)] = complex(W[a, b])
    return LiftedSolution(status="optimal", objective=0.0, W_entries=entries, kind=kind, n=n, support=support)


def random_v(rng, n):
    return rng.uniform(0.9, 1.1, n) * np.exp(1j * rng.uniform(-0.6, 0.6, n))


class TestTolerances:
    def test_defaults(self):
        t = Tolerances()
        assert (t.eps_rank, t.eps_tight, t.eps_cycle, t.eps_residual) == (1e-6, 1e-4, 1e-3, 1e-5)

    @pytest.mark.parametrize("bad", [0.0, -1e-3, math.inf, math.nan])
    def test_positive(self, bad):
        with pytest.raises(ValueError):
            Tolerances(eps_tight=bad)


class TestRankOne:
    def test_outer_product(self):
        v = np.array([1.0, 0.98 * np.exp(-0.1j)])
        cert = rank1_certificate(np.outer(v, v.conj()))
        assert cert.exact and cert.path == "dense-rank"
        assert cert.evidence["ratio"] <= 1e-15
        assert cert.evidence["psd_consistent"]

    def test_identity(self):
        cert = rank1_certificate(np.eye(3))
        assert not cert.exact and cert.evidence["ratio"] == pytest.approx(1.0)

    def test_threshold_is_ratio(self):
        W = np.diag([1.0, 0.5e-6, 0.0]).astype(complex)
        assert rank1_certificate(W).exact
        assert not rank1_certificate(W, Tolerances(eps_rank=1e-7)).exact
        assert rank1_certificate(10 * W).evidence["ratio"] == pytest.approx(0.5e-6)

    def test_negative_eigenvalue_counts(self):
        W = np.diag([1.0, 0.0, -1e-3]).astype(complex)
        cert = rank1_certificate(W)
        assert not cert.exact and not cert.evidence["psd_consistent"]

    @pytest.mark.parametrize("W,msg", [
        (np.array([[1, 1j], [1j, 1]]), "Hermitian"),
        (np.zeros((2, 2)), "zero"),
        (np.zeros((2, 3)), "square"),
        (np.array([[0.0, 0.0], [0.0, 1.0]]), "positive"),
    ])
    def test_rejects(self, W, msg):
        with pytest.raises(CertificationError, match=msg):
            rank1_certificate(W)

    def test_hermitian_tolerance(self):
        W = np.eye(2, dtype=complex)
        W[0, 1] = 1e-12
        rank1_certificate(W)  # within 1e-9

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 20), st.integers(0, 2**32 - 1))
    def test_rank_one_is_psd(self, n, seed):
        rng = np.random.default_rng(seed)
        v = rng.normal(size=n) + 1j * rng.normal(size=n)
        W = np.outer(v, v.conj())
        lam = np.linalg.eigvalsh(W)
        assert lam[0] >= -1e-9 * lam[-1]
        cert = rank1_certificate(W)
        assert cert.exact and cert.evidence["psd_consistent"]

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 20), st.integers(0, 2**32 - 1))
    def test_interlacing(self, n, seed):
        rng = np.random.default_rng(seed)
        A = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
        W = A + A.conj().T
        lam = np.linalg.eigvalsh(W)
        assert lam[0] - 1e-12 <= W[0, 0].real <= lam[-1] + 1e-12


class TestTightness:
    def test_examples(self, two_bus):
        W = np.array([[1.0, 1.0], [1.0, 1.0]], dtype=complex)
        rep = tightness_check(partial_solution(W, [(0, 1)]), two_bus)
        assert rep.max == 0 and rep.passed and rep.argmax == (0, 1)
        W[0, 1] = W[1, 0] = 0.99
        rep = tightness_check(partial_solution(W, [(0, 1)]), two_bus)
        assert rep.max == pytest.approx(0.0199) and not rep.passed

    def test_relative_scaling(self, two_bus):
        W = np.array([[4.0, 3.9], [3.9, 4.0]], dtype=complex)
        rep = tightness_check(partial_solution(W, [(0, 1)]), two_bus)
        assert rep.max == pytest.approx((16 - 3.9**2) / 16)

    def test_missing_entry(self, triangle):
        W = np.eye(3, dtype=complex)
        with pytest.raises(CertificationError, match="no entry"):
            tightness_check(partial_solution(W, [(0, 1), (1, 2)]), triangle)

    def test_case14_socr_fails(self, solved):
        sol = solved.solve("case14", "SOCR")
        cert = certify(sol, solved.case("case14"))
        assert not cert.exact


class TestCycles:
    def _triangle_solution(self, a12, a23, a31):
        W = np.eye(3, dtype=complex)
        W[0, 1] = np.exp(1j * a12)
        W[1, 2] = np.exp(1j * a23)
        W[0, 2] = np.conj(np.exp(1j * a31))
        return partial_solution(W, [(0, 1), (1, 2), (0, 2)])

    def _basis(self, triangle):
        g = PowerGraph.from_case(triangle)
        return fundamental_cycles(g, spanning_tree(g))

    def test_consistent_angles(self, triangle):
        rep = cycle_check(self._triangle_solution(0.1, 0.2, -0.3), self._basis(triangle))
        assert rep.max == pytest.approx(0.0, abs=1e-15) and rep.passed

    def test_inconsistent_angles(self, triangle):
        rep = cycle_check(self._triangle_solution(0.1, 0.2, -0.31), self._basis(triangle))
        assert rep.max == pytest.approx(0.01) and not rep.passed
        assert rep.cycles[rep.argmax][0] == rep.cycles[rep.argmax][-1]

    def test_wraps_full_turns(self, triangle):
        rep = cycle_check(self._triangle_solution(3.0, 3.0, 2 * math.pi - 6.0), self._basis(triangle))
        assert rep.max == pytest.approx(0.0, abs=1e-12)

    def test_zero_entry_is_diagnosed(self, triangle):
        sol = self._triangle_solution(0.1, 0.2, -0.3)
        sol.W_entries[(1, 2)] = 0j
        rep = cycle_check(sol, self._basis(triangle))
        assert not rep.passed and rep.diagnostics and math.isinf(rep.max)
        cert = sparse_certificate(sol, triangle)
        assert not cert.exact and cert.evidence["diagnostics"]

    def test_radial_is_vacuous(self, solved):
        case = solved.case("case141")
        g = PowerGraph.from_case(case)
        rep = cycle_check(solved.solve("case141", "STCR"), fundamental_cycles(g, spanning_tree(g)))
        assert rep.residuals.size == 0 and rep.passed

    def test_case9_stcr(self, solved):
        _, cert, _ = solved.certified("case9", "STCR")
        assert cert.exact and cert.path == "sparse-completion"
        assert cert.evidence["support"] == "lines+slack-row"


class TestWrap:
    @given(st.floats(-1e4, 1e4))
    def test_range_and_congruence(self, a):
        w = wrap_angle(a)
        assert -math.pi < w <= math.pi
        assert abs(math.remainder(w - a, 2 * math.pi)) < 1e-9

    def test_boundary(self):
        assert wrap_angle(-math.pi) == math.pi
        assert wrap_angle(math.pi) == math.pi
        assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)


class TestCompletion:
    def test_two_bus(self, two_bus):
        sol = solve(build("SOCR", two_bus)[0])
        Wc = complete_rank1(sol, two_bus)
        assert completion_mismatch(Wc, sol, two_bus) <= 1e-6
        assert rank1_certificate(Wc).exact

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 15), st.integers(0, 2**32 - 1))
    def test_tree_support_reproduces_outer_product(self, n, seed):
        rng = np.random.default_rng(seed)
        base = make_two_bus()
        buses = (replace(base.buses[0], id=1),) + tuple(Bus(k + 1, 0.9, 1.1) for k in range(1, n))
        branches = tuple(Branch(int(rng.integers(1, k + 1)), k + 1, 0.01, 0.1) for k in range(1, n))
        case = replace(base, buses=buses, branches=branches, generators=base.generators[:1])
        v = random_v(rng, n)
        v = v * np.exp(-1j * np.angle(v[0]))
        W = np.outer(v, v.conj())
        sol = partial_solution(W, case.branch_ends())
        np.testing.assert_allclose(complete_rank1(sol, case), W, atol=1e-12)

    def test_case69_stcr(self, solved):
        sol, cert, _ = solved.certified("case69", "STCR")
        assert cert.exact
        assert rank1_certificate(complete_rank1(sol, solved.case("case69"))).exact

    def test_refuses_uncertified(self, solved):
        with pytest.raises(CertificationError, match="completion conditions"):
            complete_rank1(solved.solve("case14", "SOCR"), solved.case("case14"))


class TestRecovery:
    def test_outer_product(self):
        v = np.array([1.0, 0.95 * np.exp(0.05j)])
        rec = recover_voltages(np.outer(v, v.conj()))
        np.testing.assert_allclose(rec.v, v, atol=1e-12)
        assert np.angle(rec.v[0]) == 0.0

    def test_global_phase_removed(self, triangle, rng):
        v = random_v(rng, 3)
        v = v * np.exp(-1j * np.angle(v[0]))
        rec = recover_voltages(np.outer(v * np.exp(0.7j), (v * np.exp(0.7j)).conj()), triangle)
        np.testing.assert_allclose(rec.v, v, atol=1e-12)
        assert rec.residuals.shape == (3,) and rec.max_residual == 0.0

    def test_rejects_higher_rank(self):
        with pytest.raises(CertificationError, match="rank one"):
            recover_voltages(np.eye(2))

    def test_injections_balance_losses(self, triangle, rng):
        v = random_v(rng, 3)
        flows = branch_flows(triangle, v)
        s = bus_injections(triangle, v)
        assert s.sum() == pytest.approx(flows.sum())
        # series losses are nonnegative
        assert (flows[:, 0] + flows[:, 1]).real.min() >= 0

    def test_case9_sdr_residual(self, solved):
        sol, cert, _ = solved.certified("case9", "SDR")
        assert cert.exact
        rec = recover_voltages(sol.W_dense, solved.case("case9"), sol)
        assert rec.max_residual <= 1e-5
        assert set(rec.violations) == {"voltage", "balance_p", "balance_q", "unserved",
                                       "pg_limits", "qg_limits", "line_limits"}

    @pytest.mark.parametrize("name", ["two_bus", "triangle"])
    def test_desk_cases_match_grid_optimum(self, name, two_bus, triangle):
        case = {"two_bus": two_bus, "triangle": triangle}[name]
        obj, mags, angles = GRID_OPTIMA[name]
        sol = solve(build("SDR", case)[0])
        cert = certify(sol, case)
        assert cert.exact
        assert abs(sol.objective - obj) / obj <= 1e-3
        rec = recover_voltages(sol.W_dense, case, sol)
        assert np.max(np.abs(np.abs(rec.v) - mags)) <= 1e-3
        assert np.max(np.abs(np.angle(rec.v) - angles)) <= 1e-3


class TestGap:
    def test_examples(self):
        assert optimality_gap(100.0, 100.0) == 0.0
        assert optimality_gap(99.0, 100.0) == pytest.approx(1.0)
        assert optimality_gap(100.00001, 100.0) == 0.0  # solver noise
        assert optimality_gap(101.0, 100.0) == pytest.approx(-1.0)
        assert optimality_gap(1.0, None) is None
        assert optimality_gap(1.0, math.nan) is None
        with pytest.raises(ValueError):
            optimality_gap(1.0, 0.0)

    @pytest.mark.parametrize("name,expected", [("case14", 0.08), ("case141", 0.04)])
    def test_socr_table_values(self, solved, name, expected):
        # the case141 figure is not reproduced: a radial network makes SOCR exact
        gap = optimality_gap(solved.solve(name, "SOCR").objective, load_reference_objectives()[name])
        if name == "case141":
            pytest.xfail(f"radial network, SOCR is exact here (gap {gap:.4f})")
        assert round(gap, 2) == expected

    def test_reference_file(self, tmp_path):
        refs = load_reference_objectives()
        assert set(refs) == set(BUNDLED_CASES)
        path = tmp_path / "refs.json"
        path.write_text(json.dumps({"_note": "x", "mine": 12.5}))
        assert load_reference_objectives(path) == {"mine": 12.5}


class TestSerialization:
    def test_json_round_trip(self, solved):
        for kind in ("SDR", "STCR"):
            _, cert, _ = solved.certified("case9", kind)
            back = ExactnessCertificate.from_json(cert.to_json())
            assert back.to_dict() == cert.to_dict()
            assert json.loads(cert.to_json())["tolerances"]["eps_cycle"] == 1e-3

    def test_non_finite_become_null(self):
        cert = ExactnessCertificate("not-certified", "sparse-completion",
                                    evidence={"max_cycle": math.inf, "cycle_residuals": np.array([math.inf, 0.5])})
        data = json.loads(cert.to_json())
        assert data["evidence"] == {"max_cycle": None, "cycle_residuals": [None, 0.5]}

    @given(st.dictionaries(st.text(min_size=1, max_size=8),
                           st.one_of(st.floats(allow_nan=False, allow_infinity=False), st.integers(), st.text(),
                                     st.lists(st.floats(allow_nan=False, allow_infinity=False), max_size=5))))
    def test_random_evidence(self, evidence):
        cert = ExactnessCertificate("exact", "dense-rank", "SDR", "x", Tolerances().to_dict(), evidence)
        assert ExactnessCertificate.from_json(cert.to_json()).to_dict() == cert.to_dict()


class TestDispatch:
    def test_paths(self, solved):
        case = solved.case("case14")
        assert certify(solved.solve("case14", "SDR"), case).path == "dense-rank"
        for kind in ("SOCR", "TCR", "STCR"):
            assert certify(solved.solve("case14", kind), case).path == "sparse-completion"

    def test_non_optimal(self, case9):
        with pytest.raises(CertificationError, match="status"):
            certify(LiftedSolution(status="infeasible", objective=math.nan), case9)

    def test_unknown_support(self, solved):
        with pytest.raises(ValueError, match="support"):
            sparse_certificate(solved.solve("case14", "SDR"), solved.case("case14"), support="dense")
