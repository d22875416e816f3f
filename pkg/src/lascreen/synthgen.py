"""Synthetic national pupil populations with known multilevel structure.

The data-generating process is the fitted three-level model itself: LA and
school random coefficients, pupil noise, and fixed effects set to reference
full-cohort (intercept-only) and random-coefficient estimates.  Covariate distributions
are calibration knobs only; none of them is used as ground truth in checks.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd

from .errors import SchemaError
from .model import (
    ADMISSIONS, DENOMINATIONS, ETHNICITIES, FULL_TERMS, GENDER_MIXES, N_KS2_GROUPS,
    TERMS, encode_frame,
)

# reference estimates used as generator truth
TABLE2_BETA = dict(zip(FULL_TERMS, (
    -0.617, 0.796, 0.247, 0.160, 0.119, 0.111, 0.086, 0.245, -0.543, -0.219, -0.239,
    -0.346, 0.313, -0.030, -0.193, 0.080, 0.044, 0.045, 0.069, 0.061, 0.248, 0.242, -0.031,
)))
TABLE3_BETA = dict(zip(FULL_TERMS, (
    -0.558, 0.787, 0.257, 0.160, 0.127, 0.112, 0.109, 0.255, -0.543, -0.233, -0.247,
    -0.376, 0.301, -0.028, -0.129, 0.042, 0.020, 0.016, 0.071, 0.010, 0.392, 0.296, -0.096,
)))
TABLE3_OMEGA_LA = ((0.004, -0.001), (-0.001, 0.002))
# (intercept, ks2c, fsm, sen_statement); the second "intercept:KS2" row of the
# school block is read as the KS2:FSM covariance
TABLE3_OMEGA_SCHOOL = (
    (0.018, 0.000, 0.004, 0.001),
    (0.000, 0.005, 0.001, 0.003),
    (0.004, 0.001, 0.014, -0.002),
    (0.001, 0.003, -0.002, 0.171),
)

KS2_SCORES = 2.35 + 0.1 * np.arange(N_KS2_GROUPS)


@dataclass(frozen=True)
class CovariateModel:
    p_girl: float = 0.5
    ethnicity_probs: tuple = (0.75, 0.05, 0.10, 0.10)
    ethnicity_la_concentration: float = 15.0
    ethnicity_school_concentration: float = 40.0
    eal_prob_white: float = 0.03
    eal_prob_minority: float = 0.5
    fsm_rate: float = 0.29
    fsm_la_sd: float = 0.4
    fsm_school_sd: float = 0.4
    sen_support_rate: float = 0.12
    sen_statement_rate: float = 0.04
    idaci_mean: float = 0.22
    idaci_la_concentration: float = 15.0
    idaci_school_concentration: float = 30.0
    idaci_pupil_concentration: float = 8.0
    admissions_probs: tuple = (0.90, 0.05, 0.05)
    gender_mix_probs: tuple = (0.88, 0.06, 0.06)
    denomination_probs: tuple = (0.80, 0.07, 0.09, 0.025, 0.005, 0.005, 0.005)
    ks2_mean: float = 4.25
    ks2_sd: float = 0.6
    ks2_school_sd: float = 0.15
    ks2_fsm_shift: float = -0.3
    ks2_sen_support_shift: float = -0.6
    ks2_sen_statement_shift: float = -1.0
    ks2_grammar_shift: float = 0.8
    ks2_secondary_modern_shift: float = -0.4

    def validate(self):
        rates = (self.p_girl, self.eal_prob_white, self.eal_prob_minority, self.fsm_rate,
                 self.sen_support_rate, self.sen_statement_rate, self.idaci_mean)
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise SchemaError("impossible prevalence: rates must lie in [0, 1]")
        if self.sen_support_rate + self.sen_statement_rate > 1.0:
            raise SchemaError("impossible prevalence: SEN rates sum above 1")
        for name, probs, k in (("ethnicity_probs", self.ethnicity_probs, len(ETHNICITIES)),
                               ("admissions_probs", self.admissions_probs, len(ADMISSIONS)),
                               ("gender_mix_probs", self.gender_mix_probs, len(GENDER_MIXES)),
                               ("denomination_probs", self.denomination_probs, len(DENOMINATIONS))):
            pr = np.asarray(probs, dtype=float)
            if pr.shape != (k,) or (pr < 0).any() or abs(pr.sum() - 1.0) > 1e-9:
                raise SchemaError(f"impossible prevalence: {name} must be {k} probabilities summing to 1")
        if not 0.0 < self.fsm_rate < 1.0 or not 0.0 < self.idaci_mean < 1.0:
            raise SchemaError("impossible prevalence: fsm_rate and idaci_mean must be interior")


@dataclass(frozen=True)
class ScenarioConfig:
    n_las: int = 151
    schools_per_la_mean: float = 20.0
    schools_per_la_min: int = 5
    schools_per_la_shape: float = 6.0
    pupils_per_school_mean: float = 162.0
    pupils_per_school_cv: float = 0.45
    min_school_size: int = 20
    beta: dict = field(default_factory=lambda: dict(TABLE2_BETA))
    la_terms: tuple = ("intercept",)
    omega_la: tuple = ((0.004,),)
    school_terms: tuple = ("intercept",)
    omega_school: tuple = ((0.032,),)
    sigma2_e: float = 0.327
    covariate_model: CovariateModel = field(default_factory=CovariateModel)
    missing_ethnicity_rate: float = 0.01
    planted_effects: tuple = ()
    planted_term: str = "intercept"
    tiny_la_size: int | None = None
    seed: int = 0

    def validate(self):
        if self.n_las < 1 or self.schools_per_la_min < 1 or self.min_school_size < 1:
            raise SchemaError("cluster counts must be positive")
        if not self.sigma2_e >= 0:
            raise SchemaError("sigma2_e must be non-negative")
        if not 0.0 <= self.missing_ethnicity_rate <= 1.0:
            raise SchemaError("missing_ethnicity_rate must lie in [0, 1]")
        unknown = [t for t in self.beta if t not in TERMS]
        if unknown:
            raise SchemaError(f"unknown beta terms {unknown}")
        for terms, om, name in ((self.la_terms, self.omega_la, "omega_la"),
                                (self.school_terms, self.omega_school, "omega_school")):
            m = np.asarray(om, dtype=float).reshape(len(terms), len(terms))
            if any(t not in TERMS for t in terms):
                raise SchemaError(f"unknown random terms in {name}")
            if not np.allclose(m, m.T):
                raise SchemaError(f"{name} is not symmetric")
            if len(terms) and np.linalg.eigvalsh(m).min() < -1e-12:
                raise SchemaError(f"{name} is not positive semi-definite")
        if self.planted_effects and self.planted_term not in self.la_terms:
            raise SchemaError("planted_term must be one of la_terms")
        self.covariate_model.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["la_terms"] = list(self.la_terms)
        d["school_terms"] = list(self.school_terms)
        d["omega_la"] = [list(r) for r in self.omega_la]
        d["omega_school"] = [list(r) for r in self.omega_school]
        d["planted_effects"] = [[la, float(o)] for la, o in self.planted_effects]
        d["covariate_model"] = {k: list(v) if isinstance(v, tuple) else v
                                for k, v in d["covariate_model"].items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SchemaError(f"unknown ScenarioConfig keys {sorted(unknown)}")
        cm = d.pop("covariate_model", {})
        unknown = set(cm) - set(CovariateModel.__dataclass_fields__)
        if unknown:
            raise SchemaError(f"unknown covariate_model keys {sorted(unknown)}")
        cm = CovariateModel(**{k: tuple(v) if isinstance(v, list) else v for k, v in cm.items()})
        for k in ("la_terms", "school_terms"):
            if k in d:
                d[k] = tuple(d[k])
        for k in ("omega_la", "omega_school"):
            if k in d:
                d[k] = tuple(tuple(r) for r in d[k])
        if "planted_effects" in d:
            d["planted_effects"] = tuple((str(a), float(b)) for a, b in d["planted_effects"])
        cfg = cls(covariate_model=cm, **d)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ScenarioConfig":
        return cls.from_dict(json.loads(text))


def la_id(k: int) -> str:
    return f"LA{k + 1:03d}"


def scenario_preset(name: str, *, seed: int = 0, offset: float = 0.15, n_planted: int = 10,
                    **overrides) -> ScenarioConfig:
    """Named generator settings.

    ``paper_full``: full-cohort fixed effects, random intercepts.
    ``paper_random_slopes``: random-coefficient fixed effects and covariances.
    ``null_la``: as ``paper_full`` with no between-LA variance.
    ``planted``: as ``paper_full`` plus intercept offsets of alternating sign
    (+offset, -offset, ...) on ``n_planted`` LAs chosen at random from ``seed``.
    """
    if name == "paper_full":
        cfg = ScenarioConfig(seed=seed)
    elif name == "paper_random_slopes":
        cfg = ScenarioConfig(
            beta=dict(TABLE3_BETA), la_terms=("intercept", "ks2c"), omega_la=TABLE3_OMEGA_LA,
            school_terms=("intercept", "ks2c", "fsm", "sen_statement"),
            omega_school=TABLE3_OMEGA_SCHOOL, sigma2_e=0.322, seed=seed,
        )
    elif name == "null_la":
        cfg = ScenarioConfig(omega_la=((0.0,),), seed=seed)
    elif name == "planted":
        cfg = ScenarioConfig(seed=seed)
        n_las = overrides.get("n_las", cfg.n_las)
        cfg = replace(cfg, planted_effects=plant_offsets(n_las, n_planted, offset, seed))
    else:
        raise SchemaError(f"unknown scenario preset {name!r}")
    cfg = replace(cfg, **overrides) if overrides else cfg
    cfg.validate()
    return cfg


def plant_offsets(n_las: int, n_planted: int, offset: float, seed) -> tuple:
    """``n_planted`` distinct LAs with offsets +offset, -offset, +offset, ..."""
    if not 0 <= n_planted <= n_las:
        raise SchemaError("n_planted must lie in 0..n_las")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    chosen = np.sort(rng.choice(n_las, size=n_planted, replace=False))
    return tuple((la_id(int(k)), float(offset if i % 2 == 0 else -offset))
                 for i, k in enumerate(chosen))


@dataclass(frozen=True, eq=False)
class Population:
    schools: pd.DataFrame
    pupils: pd.DataFrame
    truth: dict
    config: ScenarioConfig

    def truth_long(self) -> pd.DataFrame:
        """One row per (level, unit, term): the realised random effect."""
        frames = []
        for level, id_col in (("la", "la_id"), ("school", "school_id")):
            t = self.truth[level]
            ucols = [c for c in t.columns if c.startswith("u_")]
            long = t.melt(id_vars=[id_col], value_vars=ucols, var_name="term", value_name="effect")
            long["term"] = long["term"].str[2:]
            long = long.rename(columns={id_col: "unit_id"})
            if level == "la":
                long = long.merge(t[["la_id", "planted_offset"]].rename(columns={"la_id": "unit_id"}),
                                  on="unit_id")
                long.loc[long["term"] != self.config.planted_term, "planted_offset"] = 0.0
            else:
                long["planted_offset"] = 0.0
            long.insert(0, "level", level)
            frames.append(long.sort_values(["unit_id", "term"], kind="stable"))
        return pd.concat(frames, ignore_index=True)


def _beta_draw(rng, mean, conc, size):
    mean = np.clip(mean, 1e-3, 1 - 1e-3)
    return rng.beta(mean * conc, (1 - mean) * conc, size=size)


def _psd_factor(m):
    lam, vec = np.linalg.eigh(m)
    return vec * np.sqrt(np.clip(lam, 0.0, None))


def generate_population(config: ScenarioConfig) -> Population:
    """Draw LAs, schools, pupils and outcomes; deterministic given ``config.seed``."""
    config.validate()
    cm = config.covariate_model
    ss = np.random.SeedSequence(config.seed)
    r_struct, r_school, r_pupil, r_u, r_e, r_miss = (np.random.default_rng(s) for s in ss.spawn(6))

    # --- structure
    L = config.n_las
    extra = np.maximum(config.schools_per_la_mean - config.schools_per_la_min, 0.0)
    if extra > 0:
        lam = r_struct.gamma(config.schools_per_la_shape, extra / config.schools_per_la_shape, size=L)
        n_sch = config.schools_per_la_min + r_struct.poisson(lam)
    else:
        n_sch = np.full(L, config.schools_per_la_min)
    S = int(n_sch.sum())
    sigma_ln = np.sqrt(np.log1p(config.pupils_per_school_cv ** 2))
    mu_ln = np.log(config.pupils_per_school_mean) - 0.5 * sigma_ln ** 2
    sizes = np.maximum(np.round(r_struct.lognormal(mu_ln, sigma_ln, size=S)), config.min_school_size)
    sizes = sizes.astype(int)
    if config.tiny_la_size is not None:
        # the last LA becomes a single small school (an island authority)
        S = S - n_sch[-1] + 1
        n_sch = n_sch.copy()
        n_sch[-1] = 1
        sizes = np.concatenate([sizes[:S - 1], [int(config.tiny_la_size)]])
    school_la = np.repeat(np.arange(L), n_sch)

    # --- LA and school characteristics
    region = r_struct.integers(1, 10, size=L)
    la_idaci = _beta_draw(r_school, np.full(L, cm.idaci_mean), cm.idaci_la_concentration, L)
    la_fsm = r_school.normal(0.0, cm.fsm_la_sd, size=L)
    la_eth = r_school.dirichlet(np.asarray(cm.ethnicity_probs) * cm.ethnicity_la_concentration + 1e-3,
                                size=L)
    admissions = r_school.choice(len(ADMISSIONS), p=cm.admissions_probs, size=S)
    gender_mix = r_school.choice(len(GENDER_MIXES), p=cm.gender_mix_probs, size=S)
    denomination = r_school.choice(len(DENOMINATIONS), p=cm.denomination_probs, size=S)
    sch_idaci = _beta_draw(r_school, la_idaci[school_la], cm.idaci_school_concentration, S)
    sch_fsm = la_fsm[school_la] + r_school.normal(0.0, cm.fsm_school_sd, size=S)
    sch_eth = np.array([r_school.dirichlet(la_eth[k] * cm.ethnicity_school_concentration + 1e-3)
                        for k in school_la])
    sch_ks2 = r_school.normal(0.0, cm.ks2_school_sd, size=S)
    sch_ks2 += np.where(admissions == 1, cm.ks2_grammar_shift, 0.0)
    sch_ks2 += np.where(admissions == 2, cm.ks2_secondary_modern_shift, 0.0)

    school_ids = np.array([f"SCH{j + 1:05d}" for j in range(S)], dtype=object)
    la_ids = np.array([la_id(k) for k in range(L)], dtype=object)
    schools = pd.DataFrame({
        "school_id": school_ids,
        "la_id": la_ids[school_la],
        "admissions": np.array(ADMISSIONS, dtype=object)[admissions],
        "gender_mix": np.array(GENDER_MIXES, dtype=object)[gender_mix],
        "denomination": np.array(DENOMINATIONS, dtype=object)[denomination],
        "idaci_school": sch_idaci,
        "region": region[school_la],
    })

    # --- pupils
    N = int(sizes.sum())
    ps = np.repeat(np.arange(S), sizes)
    girl = np.where(gender_mix[ps] == 1, False,
                    np.where(gender_mix[ps] == 2, True, r_pupil.random(N) < cm.p_girl))
    cum = np.cumsum(sch_eth, axis=1)[ps]
    eth = (r_pupil.random(N)[:, None] > cum[:, :-1]).sum(axis=1)
    eal = r_pupil.random(N) < np.where(eth == 0, cm.eal_prob_white, cm.eal_prob_minority)
    logit0 = np.log(cm.fsm_rate / (1 - cm.fsm_rate))
    fsm = r_pupil.random(N) < 1.0 / (1.0 + np.exp(-(logit0 + sch_fsm[ps])))
    v = r_pupil.random(N)
    sen = np.where(v < cm.sen_statement_rate, 2, np.where(v < cm.sen_statement_rate + cm.sen_support_rate, 1, 0))
    idaci_p = _beta_draw(r_pupil, sch_idaci[ps], cm.idaci_pupil_concentration, N)
    latent = (cm.ks2_mean + sch_ks2[ps] + cm.ks2_fsm_shift * fsm
              + np.choose(sen, [0.0, cm.ks2_sen_support_shift, cm.ks2_sen_statement_shift])
              + r_pupil.normal(0.0, cm.ks2_sd, size=N))
    group = np.clip(np.round((latent - KS2_SCORES[0]) / 0.1).astype(int) + 1, 1, N_KS2_GROUPS)
    pupils = pd.DataFrame({
        "pupil_id": np.array([f"P{i + 1:07d}" for i in range(N)], dtype=object),
        "la_id": la_ids[school_la[ps]],
        "school_id": school_ids[ps],
        "ks2_group": group,
        "ks2_score": np.round(KS2_SCORES[group - 1], 2),
        "attainment8_raw": 0.0,
        "gender": np.where(girl, "girl", "boy").astype(object),
        "ethnicity": np.array(ETHNICITIES, dtype=object)[eth],
        "eal": eal,
        "fsm": fsm,
        "sen": np.array(("none", "support", "statement"), dtype=object)[sen],
        "idaci_pupil": idaci_p,
    })

    # --- outcome
    merged = pupils.join(schools.set_index("school_id")[
        ["admissions", "gender_mix", "denomination", "idaci_school"]], on="school_id")
    terms = tuple(TERMS)
    X, _ = encode_frame(merged, terms)
    beta = np.array([config.beta.get(t, 0.0) for t in terms])
    y = X @ beta
    col = {t: i for i, t in enumerate(terms)}
    O3 = np.asarray(config.omega_la, dtype=float).reshape(len(config.la_terms), -1)
    O2 = np.asarray(config.omega_school, dtype=float).reshape(len(config.school_terms), -1)
    u3 = r_u.standard_normal((L, len(config.la_terms))) @ _psd_factor(O3).T
    u2 = r_u.standard_normal((S, len(config.school_terms))) @ _psd_factor(O2).T
    planted = np.zeros(L)
    pos = {lid: k for k, lid in enumerate(la_ids)}
    for lid, off in config.planted_effects:
        if lid not in pos:
            raise SchemaError(f"planted LA {lid!r} does not exist")
        planted[pos[lid]] += off
    u3_eff = u3.copy()
    if config.planted_effects:
        u3_eff[:, config.la_terms.index(config.planted_term)] += planted
    pla = school_la[ps]
    for a, t in enumerate(config.la_terms):
        y += X[:, col[t]] * u3_eff[pla, a]
    for a, t in enumerate(config.school_terms):
        y += X[:, col[t]] * u2[ps, a]
    y += r_e.normal(0.0, np.sqrt(config.sigma2_e), size=N)
    pupils["attainment8_raw"] = y

    truth_la = pd.DataFrame({"la_id": la_ids})
    for a, t in enumerate(config.la_terms):
        truth_la[f"u_{t}"] = u3_eff[:, a]
    truth_la["planted_offset"] = planted
    truth_school = pd.DataFrame({"school_id": school_ids, "la_id": la_ids[school_la]})
    for a, t in enumerate(config.school_terms):
        truth_school[f"u_{t}"] = u2[:, a]
    pop = Population(schools, pupils, {"la": truth_la, "school": truth_school}, config)
    if config.missing_ethnicity_rate > 0:
        pop = inject_missingness(pop, config.missing_ethnicity_rate, r_miss)
    return pop


def inject_missingness(population: Population, rate: float, seed) -> Population:
    """Mark ethnicity missing independently with probability ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pupils = population.pupils.copy()
    hit = rng.random(len(pupils)) < rate
    if hit.any():
        eth = pupils["ethnicity"].to_numpy(dtype=object).copy()
        eth[hit] = None
        pupils["ethnicity"] = eth
    return Population(population.schools, pupils, population.truth, population.config)
