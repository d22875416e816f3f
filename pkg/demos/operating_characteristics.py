"""A reduced Monte Carlo study of flag rates and a sample-size recommendation.

Run:  python3 demos/operating_characteristics.py [replications]
Uses 60 LAs so it finishes in a few minutes;
the defaults of ``OCConfig`` give the full-size study.
"""
import sys

from lascreen.errors import InfeasibleBudgetError
from lascreen.mclab import OCConfig, choose_threshold, run_oc
from lascreen.synthgen import scenario_preset


def main(replications=10):
    base = scenario_preset("null_la", n_las=60)
    cfg = OCConfig(base=base, offsets=(0.0, 0.2, 0.4), n_planted=10, n_grid=(100, 250),
                   replications=int(replications))
    oc = run_oc(cfg)
    cols = ["offset", "n", "confidence", "fpr", "fnr", "mean_flags"]
    print(oc.table[cols].to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    for budget in (float("inf"), 10.0, 0.0):
        try:
            n, c = choose_threshold(oc, budget=budget)
            print(f"budget {budget}: sample {n} pupils per LA, {c:.0%} intervals")
        except InfeasibleBudgetError as exc:
            print(f"budget {budget}: {exc}")


if __name__ == "__main__":
    main(*sys.argv[1:])
