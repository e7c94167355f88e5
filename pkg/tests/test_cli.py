import json

import pytest

from conftest import TWO_BUS_M
from opfexact.certifier import Tolerances
from opfexact.cli import RunRecord, RunSpec, main, parse_csv, render, run, solve_and_certify
from opfexact.netmodel import BUNDLED_CASES


def synthetic_records():
    recs = []
    for c, case in enumerate(BUNDLED_CASES):
        for k, kind in enumerate(("SDR", "SOCR", "TCR", "STCR")):
            exact = (c + k) % 2 == 0
            recs.append(RunRecord(case=case, kind=kind, status="optimal", objective=1000.0 + c + k / 7,
                                  gap=0.0 if exact else 0.125 * k, verdict="exact" if exact else "not-certified",
                                  path="dense-rank" if kind == "SDR" else "sparse-completion",
                                  measure=1e-9, cycle=None if kind == "SDR" else 2e-4, face="central",
                                  iterations=20 + k, wall_time=0.5))
    return recs


@pytest.fixture
def case_file(tmp_path):
    path = tmp_path / "two_bus.m"
    path.write_text(TWO_BUS_M)
    return path


class TestRunSpec:
    def test_kinds_normalised(self):
        assert RunSpec(cases=("case9",), kinds=("sdr", "OPF-STCR")).kinds == ("SDR", "STCR")

    @pytest.mark.parametrize("kw", [{"cases": ()}, {"kinds": ()}, {"fmt": "xml"}, {"jobs": 0},
                                    {"kinds": ("nSDR",)}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            RunSpec(**{"cases": ("case9",), **kw})


class TestRun:
    def test_case9_sdr(self):
        records, report = run(RunSpec(cases=("case9",), kinds=("SDR",)))
        (rec,) = records
        assert rec.exact and rec.path == "dense-rank" and rec.gap == pytest.approx(0.0, abs=5e-3)
        assert "0.00" in report and "✓" in report

    def test_missing_file_is_a_record(self, tmp_path):
        records, report = run(RunSpec(cases=(str(tmp_path / "nope.m"), "case9"), kinds=("SOCR",)))
        assert [r.failed for r in records] == [True, False]
        assert records[0].case == "nope" and "ERR" in report and "Errors:" in report

    def test_file_case_has_no_reference(self, case_file):
        (rec,) = run(RunSpec(cases=(str(case_file),), kinds=("SDR",)))[0]
        assert rec.case == "two_bus" and rec.gap is None and rec.exact
        assert "n/a" in render([rec])

    def test_custom_reference(self, case_file, tmp_path):
        refs = tmp_path / "refs.json"
        (plain,) = run(RunSpec(cases=(str(case_file),), kinds=("SDR",)))[0]
        refs.write_text(json.dumps({"two_bus": plain.objective * 1.01}))
        (rec,) = run(RunSpec(cases=(str(case_file),), kinds=("SDR",), reference_objectives=str(refs)))[0]
        assert rec.gap == pytest.approx(100 * 0.01 / 1.01, rel=1e-9)

    def test_tight_tolerance_changes_verdict(self):
        strict = Tolerances(eps_tight=1e-14, eps_cycle=1e-14)
        (rec,) = run(RunSpec(cases=("case9",), kinds=("STCR",), tolerances=strict))[0]
        assert rec.verdict == "not-certified" and rec.status == "optimal"

    def test_deterministic_verdicts(self):
        spec = RunSpec(cases=("case9",), kinds=("SOCR", "TCR"), fmt="json")
        a = [(r.verdict, r.objective) for r in run(spec)[0]]
        b = [(r.verdict, r.objective) for r in run(spec)[0]]
        assert a == b

    def test_parallel_matches_serial(self):
        serial = run(RunSpec(cases=("case9", "case14"), kinds=("SOCR",)))[0]
        parallel = run(RunSpec(cases=("case9", "case14"), kinds=("SOCR",), jobs=2))[0]
        assert [(r.case, r.verdict, r.objective) for r in serial] == \
            [(r.case, r.verdict, r.objective) for r in parallel]

    def test_pipeline_face(self, solved):
        case = solved.case("case14")
        sol, cert, face = solve_and_certify(case, "SOCR")
        assert face == "central" and not cert.exact


class TestRender:
    def test_table_layout(self):
        text = render(synthetic_records())
        lines = text.splitlines()
        assert lines[0].startswith("Ex post exactness")
        titles = [i for i, l in enumerate(lines) if l.startswith("Optimality gap")]
        assert len(titles) == 1
        for case in BUNDLED_CASES:
            assert sum(l.startswith(case + " ") for l in lines) == 2
        assert "OPF-SDR" in lines[2] and lines[2].index("OPF-SOCR") < lines[2].index("OPF-TCR")

    def test_json(self):
        recs = synthetic_records()[:1]
        data = json.loads(render(recs, "json"))
        assert len(data) == 1 and data[0]["case"] == "case9" and data[0]["cycle"] is None

    def test_csv_round_trip(self):
        recs = synthetic_records()
        recs.append(RunRecord(case="broken", kind="SDR", status="error", error="OSError: missing"))
        assert parse_csv(render(recs, "csv")) == recs

    def test_empty(self):
        with pytest.raises(ValueError):
            render([])

    def test_status_cell(self):
        rec = RunRecord(case="x", kind="SDR", status="infeasible")
        assert "infeasible" in render([rec])


class TestMain:
    def test_json_stdout(self, capsys):
        assert main(["--case", "case9", "--relaxation", "SDR", "--format", "json"]) == 0
        (rec,) = json.loads(capsys.readouterr().out)
        assert rec["verdict"] == "exact" and rec["kind"] == "SDR"

    def test_out_file(self, tmp_path, capsys):
        out = tmp_path / "report.csv"
        assert main(["--case", "case9", "--relaxation", "TCR", "--format", "csv", "--out", str(out)]) == 0
        assert capsys.readouterr().out == ""
        (rec,) = parse_csv(out.read_text())
        assert rec.case == "case9" and rec.exact

    def test_error_exit(self, tmp_path, capsys):
        assert main(["--case", str(tmp_path / "missing.m"), "--relaxation", "SDR"]) == 1
        assert "ERR" in capsys.readouterr().out

    def test_case_dir(self, tmp_path, case_file, capsys):
        assert main(["--case-dir", str(case_file.parent), "--relaxation", "SOCR", "--format", "json"]) == 0
        assert json.loads(capsys.readouterr().out)[0]["case"] == "two_bus"

    @pytest.mark.parametrize("argv", [["--case-dir", "/nonexistent-dir"],
                                      ["--case", "case9", "--backend", "mosek"],
                                      ["--case", "case9", "--relaxation", "nSDR"],
                                      ["--case", "case9", "--eps-rank", "0"],
                                      ["--case", "case9", "--jobs", "0"]])
    def test_usage_errors(self, argv, capsys):
        assert main(argv) == 2
        assert capsys.readouterr().err.startswith("opfexact:")

    def test_bad_format_is_argparse_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["--format", "xml"])
        assert exc.value.code == 2
