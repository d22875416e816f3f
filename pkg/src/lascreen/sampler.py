"""Per-LA sampling designs with auditable quotas, exclusions and weights.

Design A (``srs_per_la``) draws a simple random sample of pupils within each
LA.  Design B (``equal_per_school``) takes the same number of pupils from every
school in an LA so that the LA total is close to the target.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import SchemaError

DESIGN_KINDS = ("srs_per_la", "equal_per_school")
DESIGN_ALIASES = {"srs": "srs_per_la", "equal": "equal_per_school"}


@dataclass(frozen=True)
class SampleDesign:
    kind: str = "srs_per_la"
    target_per_la: int = 250
    min_la_size: int = 100
    seed: int = 0

    def __post_init__(self):
        kind = DESIGN_ALIASES.get(self.kind, self.kind)
        if kind not in DESIGN_KINDS:
            raise SchemaError(f"unknown design kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if int(self.target_per_la) < 1:
            raise SchemaError("target_per_la must be at least 1")
        if int(self.min_la_size) < 0:
            raise SchemaError("min_la_size must be non-negative")


@dataclass(frozen=True, eq=False)
class SampleResult:
    """Selected pupils plus the per-LA audit trail.

    ``selection`` has columns pupil_id, la_id, school_id, weight in population
    order.  ``la_counts`` has one row per LA in the population with its size,
    school count, quota (design B) and achieved count (0 when excluded).
    """

    design: SampleDesign
    selection: pd.DataFrame
    la_counts: pd.DataFrame
    exclusions: list = field(default_factory=list)
    unsampled_schools: int = 0

    @property
    def n(self) -> int:
        return len(self.selection)

    @property
    def n_las(self) -> int:
        return int((self.la_counts["n_sampled"] > 0).sum())

    @property
    def n_schools(self) -> int:
        return int(self.selection["school_id"].nunique())

    def pupils(self, population_pupils: pd.DataFrame) -> pd.DataFrame:
        """Rows of the population pupil table that were selected."""
        keep = population_pupils["pupil_id"].isin(self.selection["pupil_id"])
        return population_pupils.loc[keep].reset_index(drop=True)

    def audit(self) -> dict:
        quotas = {r.la_id: int(r.quota) for r in self.la_counts.itertuples() if r.quota > 0}
        return {
            "design": self.design.kind,
            "target_per_la": int(self.design.target_per_la),
            "min_la_size": int(self.design.min_la_size),
            "seed": int(self.design.seed),
            "n_selected": self.n,
            "n_las": self.n_las,
            "n_schools_sampled": self.n_schools,
            "unsampled_schools": int(self.unsampled_schools),
            "exclusions": list(self.exclusions),
            "quotas": quotas,
            "la_counts": {r.la_id: int(r.n_sampled) for r in self.la_counts.itertuples()},
        }

    def to_csv(self, path) -> None:
        self.selection.to_csv(path, index=False, lineterminator="\n", float_format="%.17g")

    def audit_json(self) -> str:
        return json.dumps(self.audit(), indent=2, sort_keys=True)


def _frame(population) -> pd.DataFrame:
    pupils = population.pupils if hasattr(population, "pupils") else population
    if len(pupils) == 0:
        raise SchemaError("empty population")
    if pupils["pupil_id"].duplicated().any():
        raise SchemaError("duplicate pupil_id in population")
    return pupils


def _la_stream(seed, k):
    # one substream per LA position so LAs can be drawn independently
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))


def _groups(pupils):
    la_codes, la_ids = pd.factorize(pupils["la_id"], sort=True)
    return la_codes, np.asarray(la_ids, dtype=object)


def _draw(population, design: SampleDesign, kind: str) -> SampleResult:
    if design.kind != kind:
        raise SchemaError(f"design kind {design.kind!r} passed to {kind}")
    pupils = _frame(population)
    la_codes, la_ids = _groups(pupils)
    order = np.argsort(la_codes, kind="stable")
    bounds = np.searchsorted(la_codes[order], np.arange(len(la_ids) + 1))
    school = pupils["school_id"].to_numpy(dtype=object)
    target = int(design.target_per_la)
    picked, rows, exclusions = [], [], []
    for k, lid in enumerate(la_ids):
        idx = order[bounds[k]:bounds[k + 1]]
        N = idx.size
        sch_codes, sch_ids = pd.factorize(school[idx], sort=False)
        s = len(sch_ids)
        if N < design.min_la_size:
            exclusions.append({"la_id": lid, "reason": f"LA size {N} below minimum {design.min_la_size}",
                               "n_population": int(N)})
            rows.append((lid, N, s, 0, 0))
            continue
        rng = _la_stream(design.seed, k)
        if kind == "srs_per_la":
            take = np.sort(rng.choice(N, size=min(target, N), replace=False))
            quota = 0
        else:
            quota = max(1, int(np.floor(target / s + 0.5)))
            take = []
            sch_order = np.argsort(sch_codes, kind="stable")
            sb = np.searchsorted(sch_codes[sch_order], np.arange(s + 1))
            for j in range(s):
                members = sch_order[sb[j]:sb[j + 1]]
                take.append(members[np.sort(rng.choice(members.size, size=min(quota, members.size),
                                                       replace=False))])
            take = np.sort(np.concatenate(take))
        picked.append(idx[take])
        rows.append((lid, N, s, quota, take.size))
    sel = np.sort(np.concatenate(picked)) if picked else np.array([], dtype=int)
    la_counts = pd.DataFrame(rows, columns=["la_id", "n_population", "n_schools", "quota", "n_sampled"])
    selection = pupils.iloc[sel][["pupil_id", "la_id", "school_id"]].reset_index(drop=True)
    selection["weight"] = 1.0
    included = la_counts.loc[la_counts["n_sampled"] > 0, "la_id"]
    all_schools = pupils.loc[pupils["la_id"].isin(included), "school_id"].nunique()
    result = SampleResult(design, selection, la_counts, exclusions,
                          int(all_schools - selection["school_id"].nunique()))
    return attach_weights(result, population)


def srs_per_la(population, design: SampleDesign) -> SampleResult:
    """Design A: per eligible LA, ``min(target, N)`` pupils without replacement."""
    return _draw(population, design, "srs_per_la")


def equal_per_school(population, design: SampleDesign) -> SampleResult:
    """Design B: per eligible LA, ``round(target / s)`` pupils (at least 1) from each school."""
    return _draw(population, design, "equal_per_school")


def draw_sample(population, design: SampleDesign) -> SampleResult:
    return (srs_per_la if design.kind == "srs_per_la" else equal_per_school)(population, design)


def attach_weights(sample: SampleResult, population) -> SampleResult:
    """Inverse-inclusion weights: N_LA / n_LA (design A) or N_school / n_school (design B)."""
    pupils = _frame(population)
    sel = sample.selection
    pop = pupils.set_index("pupil_id")[["la_id", "school_id"]]
    if not sel["pupil_id"].isin(pop.index).all():
        raise SchemaError("sample contains pupils absent from the population")
    ref = pop.loc[sel["pupil_id"]]
    if ((ref["la_id"].to_numpy() != sel["la_id"].to_numpy()).any()
            or (ref["school_id"].to_numpy() != sel["school_id"].to_numpy()).any()):
        raise SchemaError("sample membership disagrees with the population")
    key = "la_id" if sample.design.kind == "srs_per_la" else "school_id"
    N = pupils.groupby(key).size()
    n = sel.groupby(key).size()
    weight = (N.loc[sel[key]].to_numpy() / n.loc[sel[key]].to_numpy()).astype(float)
    selection = sel.assign(weight=weight)
    return SampleResult(sample.design, selection, sample.la_counts, sample.exclusions,
                        sample.unsampled_schools)
