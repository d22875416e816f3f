"""Generate a population, sample it both ways, fit and screen the LAs.

Run:  python3 demos/screening_walkthrough.py [outdir]
Writes caterpillar SVGs for the full data and the design-A sample and prints
how many LAs are flagged in each, plus the average interval width ratio.
"""
import sys
from dataclasses import replace
from pathlib import Path

from lascreen.estimator import fit
from lascreen.inference import caterpillar_data, eb_residuals, interval_width_ratio, intervals
from lascreen.model import build_design, model_preset
from lascreen.plotting import CaterpillarOptions, render_caterpillar
from lascreen.sampler import SampleDesign, draw_sample
from lascreen.synthgen import generate_population, scenario_preset


def screen(pupils, schools, label, out):
    spec = model_preset("table1")
    design = build_design(pupils, schools, spec)
    result = fit(design, spec)
    print(f"{label}: {design.n} pupils, -2LL {result.minus2ll:.1f}, "
          f"Omega_LA {result.omega_la[0, 0]:.4f}, Omega_school {result.omega_school[0, 0]:.4f}")
    resid = eb_residuals(design, result, "la")
    reports = {c: intervals(resid, c) for c in (0.90, 0.95)}
    for c, rep in reports.items():
        high, low = rep.counts()["intercept"]
        print(f"  {c:.0%} intervals: {high} LAs above, {low} below")
    cat = caterpillar_data(reports[0.95])
    svg = render_caterpillar(cat, CaterpillarOptions(title=f"{label}: LA effects, 95% intervals"))
    (out / f"caterpillar_{label}.svg").write_text(svg, encoding="utf-8")
    return reports[0.95]


def main(out="demo_output"):
    out = Path(out)
    out.mkdir(exist_ok=True)
    pop = generate_population(scenario_preset("paper_full", seed=1, tiny_la_size=22))
    print(f"population: {len(pop.pupils)} pupils in {len(pop.schools)} schools")
    full = screen(pop.pupils, pop.schools, "full", out)
    sample = draw_sample(pop, SampleDesign("srs", 250, 100, seed=1))
    for ex in sample.exclusions:
        print(f"excluded {ex['la_id']}: {ex['reason']}")
    part = screen(sample.pupils(pop.pupils), pop.schools, "sample", out)
    keep = full.table["unit_id"].isin(part.table["unit_id"])
    ratio = interval_width_ratio(part, replace(full, table=full.table[keep]))
    print(f"sample intervals are {ratio:.2f} times the full-data width on average")


if __name__ == "__main__":
    main(*sys.argv[1:])
