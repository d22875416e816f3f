"""Regenerate tests/data/toy_oracle.json with the dense brute-force optimiser.

Run from the repository root:  python3 tests/make_toy_oracle.py
Instances are drawn from fixed seeds; the blockwise fit is consulted only to
skip draws whose optimum lies on the covariance boundary, where a generic
optimiser cannot pin the parameters to 1e-4.
"""
import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))
from oracles import dense_fit, random_toy  # noqa: E402

from lascreen.estimator import fit  # noqa: E402

KINDS = (
    ("intercepts", {}, 6),
    ("school_slope", {"slopes": True}, 3),
    ("la_and_school_slopes", {"slopes": True, "la_slope": True,
                              "omega_la": [[0.8, 0.2], [0.2, 0.6]]}, 3),
)


def main(out=Path(__file__).parent / "data" / "toy_oracle.json"):
    cases = []
    seed = 0
    for kind, kw, want in KINDS:
        got = 0
        while got < want:
            seed += 1
            rng = np.random.default_rng(seed)
            d = random_toy(rng, n_las=3, schools=(2, 3), pupils=(4, 6), **kw)
            if d.n > 60 or fit(d).boundary_flags:
                continue
            o = dense_fit(d, restarts=3, seed=seed)
            la = [str(x) for x in np.asarray(d.la_ids)[d.la_index]]
            sch = [str(x) for x in np.asarray(d.school_ids)[d.school_index]]
            cases.append({
                "kind": kind, "seed": seed, "y": d.y.tolist(), "X": d.X.tolist(),
                "la": la, "school": sch, "term_names": list(d.term_names),
                "random_blocks": {"la": list(d.spec.random_terms("la")),
                                  "school": list(d.spec.random_terms("school"))},
                "oracle": {"beta": o["beta"].tolist(), "sigma2": float(o["sigma2"]),
                           "omega_la": o["omega_la"].tolist(),
                           "omega_school": o["omega_school"].tolist(),
                           "minus2ll": float(o["minus2ll"])},
            })
            got += 1
            print(kind, seed, d.n, o["minus2ll"], flush=True)
    out.parent.mkdir(exist_ok=True)
    out.write_text(json.dumps({"cases": cases}, indent=1) + "\n")


if __name__ == "__main__":
    main()
