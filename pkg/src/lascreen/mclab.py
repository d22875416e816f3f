"""Monte Carlo operating characteristics of LA screening.

Each replication generates a population with planted LA effects, draws a
design-A sample, fits the model, screens the LA coefficient and scores the
flags against the planted truth.  Random streams are keyed by grid values and
replication number, never by grid position, so adding or removing a grid value
leaves the draws of every other cell unchanged.  One population per
(offset, replication) is shared by all sample sizes.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .errors import FitError, InfeasibleBudgetError, SchemaError
from .estimator import FitOptions, fit
from .inference import eb_residuals, intervals
from .model import ModelSpec, build_design, model_preset
from .sampler import SampleDesign, srs_per_la
from .synthgen import ScenarioConfig, generate_population, plant_offsets, scenario_preset

OC_COLUMNS = ["n", "confidence", "offset", "fpr", "fnr", "se_fpr", "se_fnr", "mean_flags"]


@dataclass(frozen=True)
class OCConfig:
    # planted offsets are the only LA differences, so unflagged truth is exact
    base: ScenarioConfig = field(default_factory=lambda: scenario_preset("null_la"))
    offsets: tuple = (0.0, 0.1, 0.2)
    n_planted: int = 10
    n_grid: tuple = (100, 250)
    confidence_grid: tuple = (0.90, 0.95)
    replications: int = 200
    seed: int = 0
    preset: str = "table1"
    term: str = "intercept"
    directional: bool = False
    min_la_size: int = 100
    fixed_terms: tuple = ()  # empty: the preset's full fixed part

    def model_spec(self) -> ModelSpec:
        spec = model_preset(self.preset)
        if self.fixed_terms:
            spec = ModelSpec(tuple(self.fixed_terms), spec.random_blocks, spec.outcome_transform)
        return spec

    def validate(self):
        if self.replications < 1:
            raise SchemaError("replications must be at least 1")
        if not self.offsets or not self.n_grid or not self.confidence_grid:
            raise SchemaError("grids must be nonempty")
        if any(o < 0 for o in self.offsets):
            raise SchemaError("offsets are magnitudes and must be non-negative")
        if any(int(n) < 1 for n in self.n_grid):
            raise SchemaError("sample sizes must be positive")
        if any(not 0 < c < 1 for c in self.confidence_grid):
            raise SchemaError("confidence levels must lie in (0, 1)")
        if not 0 <= self.n_planted <= self.base.n_las:
            raise SchemaError("n_planted must lie in 0..n_las")
        if self.term not in self.model_spec().random_terms("la"):
            raise SchemaError(f"term {self.term!r} has no LA random coefficient in {self.preset}")

    def to_dict(self) -> dict:
        return {
            "base": self.base.to_dict(), "offsets": list(self.offsets), "n_planted": self.n_planted,
            "n_grid": list(self.n_grid), "confidence_grid": list(self.confidence_grid),
            "replications": self.replications, "seed": self.seed, "preset": self.preset,
            "term": self.term, "directional": self.directional, "min_la_size": self.min_la_size,
            "fixed_terms": list(self.fixed_terms),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OCConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SchemaError(f"unknown OCConfig keys {sorted(unknown)}")
        base = ScenarioConfig.from_dict(d.pop("base")) if "base" in d else scenario_preset("null_la")
        for k in ("offsets", "n_grid", "confidence_grid", "fixed_terms"):
            if k in d:
                d[k] = tuple(d[k])
        cfg = cls(base=base, **d)
        cfg.validate()
        return cfg


@dataclass(frozen=True, eq=False)
class OCResult:
    """Aggregated rates in ``table`` and raw per-replication tallies in ``runs``."""

    table: pd.DataFrame
    runs: pd.DataFrame
    config: OCConfig

    @property
    def attrition(self) -> int:
        return int((self.runs.drop_duplicates(["offset", "n", "replication"])["status"] != "ok").sum())

    def to_csv(self, path) -> None:
        self.table.to_csv(path, index=False, lineterminator="\n", float_format="%.17g")

    def to_json(self) -> str:
        rows = json.loads(self.table.to_json(orient="records", double_precision=15))
        return json.dumps({"config": self.config.to_dict(), "cells": rows,
                           "attrition": self.attrition}, indent=2, sort_keys=True)


RUN_COLUMNS = ["offset", "n", "replication", "confidence", "status",
               "flags", "fp", "nulls", "tp", "positives"]


def _key(x: float) -> int:
    return int(round(x * 1_000_000))


def _replicate(config: OCConfig, offset: float, rep: int) -> list[dict]:
    """All sample sizes and confidence levels for one (offset, replication)."""
    pop_seed = np.random.SeedSequence(config.seed, spawn_key=(1, _key(offset), rep))
    seed_int = int(pop_seed.generate_state(1, np.uint64)[0])
    planted = plant_offsets(config.base.n_las, config.n_planted if offset > 0 else 0, offset, seed_int)
    scen = replace(config.base, seed=seed_int, planted_effects=planted, planted_term=config.term)
    pop = generate_population(scen)
    truth = dict(planted)
    spec = config.model_spec()
    out = []
    for n in config.n_grid:
        ss = np.random.SeedSequence(config.seed, spawn_key=(2, _key(offset), int(n), rep))
        design = SampleDesign("srs_per_la", int(n), config.min_la_size,
                              int(ss.generate_state(1, np.uint64)[0]))
        base = {"offset": offset, "n": int(n), "replication": rep}
        try:
            sample = srs_per_la(pop, design)
            dm = build_design(sample.pupils(pop.pupils), pop.schools, spec)
            res = fit(dm, spec, FitOptions())
            if not res.converged:
                raise FitError("fit did not converge")
            resid = eb_residuals(dm, res, "la")
        except (FitError, np.linalg.LinAlgError, ValueError) as exc:
            for c in config.confidence_grid:
                out.append({**base, "confidence": c, "status": f"failed: {exc}"})
            continue
        for c in config.confidence_grid:
            tab = intervals(resid, c).table
            tab = tab.loc[tab["term"] == config.term]
            off = tab["unit_id"].map(lambda u: truth.get(u, 0.0)).to_numpy()
            flag = tab["flag"].to_numpy()
            is_pos = off != 0
            if config.directional:
                hit = np.where(is_pos, np.where(off > 0, flag == "high", flag == "low"), flag == "high")
            else:
                hit = flag != "none"
            out.append({**base, "confidence": c, "status": "ok",
                        "flags": int((flag != "none").sum()),
                        "fp": int((hit & ~is_pos).sum()), "nulls": int((~is_pos).sum()),
                        "tp": int((hit & is_pos).sum()), "positives": int(is_pos.sum())})
    return out


def _job(args):
    return _replicate(*args)


def run_oc(config: OCConfig, threads: int = 1) -> OCResult:
    """Monte Carlo false-positive and false-negative rates over the grid.

    Failed replications are kept in ``runs`` with their status and excluded
    from the rates.  Results do not depend on ``threads``.
    """
    config.validate()
    jobs = [(config, float(o), r) for o in config.offsets for r in range(config.replications)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            chunks = list(ex.map(_job, jobs))
    else:
        chunks = [_job(j) for j in jobs]
    runs = pd.DataFrame([row for ch in chunks for row in ch], columns=RUN_COLUMNS)
    rows = []
    for o in config.offsets:
        for n in config.n_grid:
            for c in config.confidence_grid:
                cell = runs[(runs["offset"] == o) & (runs["n"] == n) & (runs["confidence"] == c)]
                ok = cell[cell["status"] == "ok"]
                nulls, pos = ok["nulls"].sum(), ok["positives"].sum()
                fpr = ok["fp"].sum() / nulls if nulls else math.nan
                fnr = 1.0 - ok["tp"].sum() / pos if pos else math.nan
                rows.append({
                    "n": int(n), "confidence": float(c), "offset": float(o),
                    "fpr": fpr, "fnr": fnr,
                    "se_fpr": math.sqrt(fpr * (1 - fpr) / nulls) if nulls else math.nan,
                    "se_fnr": math.sqrt(fnr * (1 - fnr) / pos) if pos else math.nan,
                    "mean_flags": ok["flags"].mean() if len(ok) else math.nan,
                    "replications": int(len(ok)), "attrition": int(len(cell) - len(ok)),
                })
    table = pd.DataFrame(rows, columns=OC_COLUMNS + ["replications", "attrition"])
    return OCResult(table, runs, config)


def choose_threshold(oc: OCResult, budget: float = math.inf, w_fn: float = 1.0, w_fp: float = 1.0,
                     offset: float | None = None) -> tuple[int, float]:
    """Grid point ``(n, confidence)`` minimising ``w_fn * FNR + w_fp * FPR``.

    Rates are averaged over offsets (or taken at ``offset``); an undefined rate
    counts as 0.  Only points whose expected flag count is within ``budget``
    are eligible.  Ties go to the smaller n, then the higher confidence.
    """
    t = oc.table if offset is None else oc.table[oc.table["offset"] == offset]
    if t.empty:
        raise ValueError("no OC cells for the requested offset")
    g = t.groupby(["n", "confidence"], sort=True).agg(
        fpr=("fpr", "mean"), fnr=("fnr", "mean"), flags=("mean_flags", "mean")).reset_index()
    g = g.fillna({"fpr": 0.0, "fnr": 0.0})
    feasible = g[g["flags"] <= budget]
    if feasible.empty:
        least = float(g["flags"].min())
        raise InfeasibleBudgetError(
            f"budget {budget} is infeasible; the minimum expected number of flags is {least:.4g}", least)
    loss = w_fn * feasible["fnr"] + w_fp * feasible["fpr"]
    feasible = feasible.assign(loss=loss, neg_conf=-feasible["confidence"])
    best = feasible.sort_values(["loss", "n", "neg_conf"], kind="mergesort").iloc[0]
    return int(best["n"]), float(best["confidence"])
