"""Regenerate ``reference_objectives.json`` with PYPOWER's AC-OPF (PIPS interior point).

Run in an environment that has ``pypower`` installed; the package itself does
not depend on it::

    python tools/make_reference_objectives.py > src/opfexact/data/reference_objectives.json
"""

import json
import sys

import numpy as np
from pypower.api import ppoption, runopf

from opfexact.netmodel import BUNDLED_CASES, _interpret, bundled_case_path, parse_matpower


def main():
    out = {}
    opt = ppoption(VERBOSE=0, OUT_ALL=0, OPF_VIOLATION=1e-8, PDIPM_FEASTOL=1e-9,
                   PDIPM_GRADTOL=1e-9, PDIPM_COMPTOL=1e-9, PDIPM_COSTTOL=1e-10)
    for name in BUNDLED_CASES:
        _, mats, scalars = _interpret(bundled_case_path(name).read_text())
        ppc = {"version": "2", "baseMVA": float(scalars["baseMVA"]),
               "bus": np.array(mats["bus"]), "gen": np.array(mats["gen"]),
               "branch": np.array(mats["branch"]), "gencost": np.array(mats["gencost"])}
        # PYPOWER mishandles cases without any flow limit; a huge rating is equivalent
        br = ppc["branch"]
        br[br[:, 5] == 0, 5] = 1e5
        r = runopf(ppc, opt)
        if not r["success"]:
            print(f"{name}: PYPOWER did not converge", file=sys.stderr)
            continue
        # PYPOWER's reported ``f`` is wrong for single-generator cases here, so the
        # objective is re-evaluated from its dispatch with the case's own cost curves
        case = parse_matpower(bundled_case_path(name).read_text(), name=name)
        pg = r["gen"][r["gen"][:, 7] > 0, 1]
        obj = sum(g.cost.evaluate(p) for g, p in zip(case.generators, pg))
        out[name] = {
            "objective": round(float(obj), 6),
            "source": "PYPOWER 5.1 runopf (PIPS), tolerances 1e-9, bundled MATPOWER case file",
        }
    note = ("AC-OPF reference objectives in $/h for the bundled cases; "
            "regenerate with tools/make_reference_objectives.py")
    json.dump({"_note": note, "cases": out}, sys.stdout, indent=2, sort_keys=True)
    print()


if __name__ == "__main__":
    main()
