"""Domain records, covariate coding and design-matrix construction.

Pupils are nested in schools, schools in Local Authorities (LAs).  The
outcome is Attainment 8 in standard-deviation units and prior attainment is
the KS2 score centred at 4 and entered with a quadratic term.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .errors import SchemaError

KS2_CENTRE = 4.0
N_KS2_GROUPS = 34

GENDERS = ("boy", "girl")
ETHNICITIES = ("White", "Black", "Asian", "Other")
SEN_LEVELS = ("none", "support", "statement")
ADMISSIONS = ("comprehensive", "grammar", "secondary_modern")
GENDER_MIXES = ("mixed", "boys", "girls")
DENOMINATIONS = ("none", "CofE", "RC", "other_christian", "jewish", "muslim", "sikh")
LEVELS = ("la", "school")

PUPIL_FIELDS = (
    "pupil_id", "la_id", "school_id", "ks2_group", "ks2_score", "attainment8_raw",
    "gender", "ethnicity", "eal", "fsm", "sen", "idaci_pupil",
)
SCHOOL_FIELDS = (
    "school_id", "la_id", "admissions", "gender_mix", "denomination",
    "idaci_school", "region",
)


@dataclass(frozen=True)
class PupilRecord:
    pupil_id: str
    la_id: str
    school_id: str
    ks2_group: int
    ks2_score: float
    attainment8_raw: float
    gender: str
    ethnicity: str | None
    eal: bool
    fsm: bool
    sen: str
    idaci_pupil: float

    def __post_init__(self):
        if not 1 <= int(self.ks2_group) <= N_KS2_GROUPS:
            raise SchemaError(f"ks2_group {self.ks2_group} outside 1..{N_KS2_GROUPS}")
        if not 0.0 <= self.idaci_pupil <= 1.0:
            raise SchemaError(f"idaci_pupil {self.idaci_pupil} outside [0, 1]")
        if self.gender not in GENDERS:
            raise SchemaError(f"unknown gender {self.gender!r}")
        if self.ethnicity is not None and self.ethnicity not in ETHNICITIES:
            raise SchemaError(f"unknown ethnicity {self.ethnicity!r}")
        if self.sen not in SEN_LEVELS:
            raise SchemaError(f"unknown sen level {self.sen!r}")


@dataclass(frozen=True)
class SchoolRecord:
    school_id: str
    la_id: str
    admissions: str = "comprehensive"
    gender_mix: str = "mixed"
    denomination: str = "none"
    idaci_school: float = 0.0
    region: int = 1

    def __post_init__(self):
        for value, allowed, name in (
            (self.admissions, ADMISSIONS, "admissions"),
            (self.gender_mix, GENDER_MIXES, "gender_mix"),
            (self.denomination, DENOMINATIONS, "denomination"),
        ):
            if value not in allowed:
                raise SchemaError(f"unknown {name} {value!r}")
        if not 0.0 <= self.idaci_school <= 1.0:
            raise SchemaError(f"idaci_school {self.idaci_school} outside [0, 1]")
        if not 1 <= int(self.region) <= 9:
            raise SchemaError(f"region {self.region} outside 1..9")


# term name -> (fields it reads, encoder on a merged pupil/school frame)
def _eq(col, value):
    return lambda f: (f[col] == value).to_numpy(float)


def _flag(col):
    return lambda f: f[col].astype(float).to_numpy()


TERMS = {
    "intercept": ((), lambda f: np.ones(len(f))),
    "ks2c": (("ks2_score",), lambda f: f["ks2_score"].to_numpy(float) - KS2_CENTRE),
    "ks2c_sq": (("ks2_score",), lambda f: (f["ks2_score"].to_numpy(float) - KS2_CENTRE) ** 2),
    "girl": (("gender",), _eq("gender", "girl")),
    "eth_black": (("ethnicity",), _eq("ethnicity", "Black")),
    "eth_asian": (("ethnicity",), _eq("ethnicity", "Asian")),
    "eth_other": (("ethnicity",), _eq("ethnicity", "Other")),
    "eal": (("eal",), _flag("eal")),
    "idaci_pupil": (("idaci_pupil",), lambda f: f["idaci_pupil"].to_numpy(float)),
    "fsm": (("fsm",), _flag("fsm")),
    "sen_support": (("sen",), _eq("sen", "support")),
    "sen_statement": (("sen",), _eq("sen", "statement")),
    "adm_grammar": (("admissions",), _eq("admissions", "grammar")),
    "adm_secondary_modern": (("admissions",), _eq("admissions", "secondary_modern")),
    "idaci_school": (("idaci_school",), lambda f: f["idaci_school"].to_numpy(float)),
    "school_boys": (("gender_mix",), _eq("gender_mix", "boys")),
    "school_girls": (("gender_mix",), _eq("gender_mix", "girls")),
    "den_cofe": (("denomination",), _eq("denomination", "CofE")),
    "den_rc": (("denomination",), _eq("denomination", "RC")),
    "den_other_christian": (("denomination",), _eq("denomination", "other_christian")),
    "den_jewish": (("denomination",), _eq("denomination", "jewish")),
    "den_muslim": (("denomination",), _eq("denomination", "muslim")),
    "den_sikh": (("denomination",), _eq("denomination", "sikh")),
}

FULL_TERMS = tuple(TERMS)

TERM_LABELS = {
    "intercept": "Intercept",
    "ks2c": "KS2 score - 4",
    "ks2c_sq": "(KS2 score - 4) squared",
    "girl": "Girl pupil",
    "eth_black": "Ethnic: Black",
    "eth_asian": "Ethnic: Asian",
    "eth_other": "Ethnic: Other",
    "eal": "Language of home not English",
    "idaci_pupil": "IDACI for pupil's residence",
    "fsm": "Free school meals eligible",
    "sen_support": "SEN support",
    "sen_statement": "SEN statement",
    "adm_grammar": "School admission: Grammar",
    "adm_secondary_modern": "School admission: Secondary Modern",
    "idaci_school": "IDACI for pupil's school",
    "school_boys": "School gender: boys",
    "school_girls": "School gender: girls",
    "den_cofe": "School denomination: Church of England",
    "den_rc": "School denomination: Roman Catholic",
    "den_other_christian": "School denomination: Other Christian",
    "den_jewish": "School denomination: Jewish",
    "den_muslim": "School denomination: Muslim",
    "den_sikh": "School denomination: Sikh",
}

OUTCOME_TRANSFORMS = ("zscore", "rank", "none")


@dataclass(frozen=True)
class ModelSpec:
    """Fixed terms plus, per level, the terms carrying random coefficients.

    ``random_blocks`` maps ``"la"`` and/or ``"school"`` to term names; the
    intercept, when present, must come first.  Every random term must also be
    a fixed term.  The residual level is always the pupil.
    """

    fixed_terms: tuple[str, ...] = FULL_TERMS
    random_blocks: Mapping[str, tuple[str, ...]] = field(
        default_factory=lambda: {"la": ("intercept",), "school": ("intercept",)}
    )
    outcome_transform: str = "zscore"

    def __post_init__(self):
        object.__setattr__(self, "fixed_terms", tuple(self.fixed_terms))
        blocks = {lvl: tuple(v) for lvl, v in dict(self.random_blocks).items() if len(v)}
        object.__setattr__(self, "random_blocks", blocks)
        if len(set(self.fixed_terms)) != len(self.fixed_terms):
            raise SchemaError("duplicate fixed terms")
        for lvl, terms in blocks.items():
            if lvl not in LEVELS:
                raise SchemaError(f"unknown random level {lvl!r}")
            if len(set(terms)) != len(terms):
                raise SchemaError(f"duplicate random terms at level {lvl!r}")
            if "intercept" in terms and terms[0] != "intercept":
                raise SchemaError("intercept must be the first random term")
            missing = [t for t in terms if t not in self.fixed_terms]
            if missing:
                raise SchemaError(f"random terms {missing} are not fixed terms")
        if self.outcome_transform not in OUTCOME_TRANSFORMS:
            raise SchemaError(f"unknown outcome transform {self.outcome_transform!r}")

    def random_terms(self, level: str) -> tuple[str, ...]:
        return self.random_blocks.get(level, ())

    @property
    def p(self) -> int:
        return len(self.fixed_terms)

    def to_dict(self) -> dict:
        return {
            "fixed_terms": list(self.fixed_terms),
            "random_blocks": {lvl: list(self.random_terms(lvl)) for lvl in LEVELS},
            "outcome_transform": self.outcome_transform,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        unknown = set(d) - {"fixed_terms", "random_blocks", "outcome_transform"}
        if unknown:
            raise SchemaError(f"unknown ModelSpec keys {sorted(unknown)}")
        if "fixed_terms" not in d or "random_blocks" not in d:
            raise SchemaError("ModelSpec needs fixed_terms and random_blocks")
        return cls(
            fixed_terms=tuple(d["fixed_terms"]),
            random_blocks={k: tuple(v) for k, v in d["random_blocks"].items()},
            outcome_transform=d.get("outcome_transform", "zscore"),
        )

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))


TABLE3_LA = ("intercept", "ks2c")
TABLE3_SCHOOL = ("intercept", "ks2c", "fsm", "sen_statement")


def model_preset(name: str, outcome_transform: str = "zscore") -> ModelSpec:
    """Preset model structures.

    ``table1``/``table2`` are random-intercept models (sample and full cohort);
    ``table3``/``table4`` add a random KS2 slope across LAs and random KS2,
    FSM and SEN-statement coefficients across schools.
    """
    if name in ("table1", "table2"):
        blocks = {"la": ("intercept",), "school": ("intercept",)}
    elif name in ("table3", "table4"):
        blocks = {"la": TABLE3_LA, "school": TABLE3_SCHOOL}
    else:
        raise SchemaError(f"unknown model preset {name!r}")
    return ModelSpec(FULL_TERMS, blocks, outcome_transform)


def center_ks2(ks2_score):
    if np.ndim(ks2_score):
        return np.asarray(ks2_score, dtype=float) - KS2_CENTRE
    return float(ks2_score) - KS2_CENTRE


def normalize_attainment8(raw_scores, method: str = "zscore") -> np.ndarray:
    """Put Attainment 8 scores on a standard-deviation scale.

    ``method="zscore"`` subtracts the mean and divides by the SD computed
    with divisor n.  ``method="rank"`` maps Blom plotting positions of the
    (average) ranks through the standard normal quantile function.
    """
    x = np.asarray(raw_scores, dtype=float)
    if x.size < 2 or np.ptp(x) == 0:
        raise ValueError("degenerate outcome")
    if method == "zscore":
        mu = x.mean()
        z = x - mu
        return z / np.sqrt(np.mean(z * z))
    if method == "rank":
        r = stats.rankdata(x)
        return stats.norm.ppf((r - 0.375) / (x.size + 0.25))
    raise ValueError(f"unknown normalisation method {method!r}")


def _required_fields(terms: Iterable[str]) -> list[str]:
    out = []
    for t in terms:
        if t not in TERMS:
            raise SchemaError(f"unknown term {t!r}")
        out.extend(f for f in TERMS[t][0] if f not in out)
    return out


def _is_missing(col: pd.Series) -> np.ndarray:
    miss = col.isna().to_numpy()
    if col.dtype == object:
        miss |= (col.astype(str).str.strip() == "").to_numpy()
    return miss


def encode_frame(frame: pd.DataFrame, terms: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised fixed-effect coding of a merged pupil/school frame.

    Returns ``(X, complete)`` where rows with any missing input used by
    ``terms`` are flagged incomplete (their X row is meaningless).
    """
    fields = _required_fields(terms)
    complete = np.ones(len(frame), dtype=bool)
    for f in fields:
        if f not in frame:
            raise SchemaError(f"column {f!r} required by the model is absent")
        complete &= ~_is_missing(frame[f])
    X = np.empty((len(frame), len(terms)))
    for j, t in enumerate(terms):
        X[:, j] = TERMS[t][1](frame)
    X[~complete] = np.nan
    return X, complete


def encode_fixed_row(pupil: PupilRecord, school: SchoolRecord, spec: ModelSpec):
    """Fixed-effect row for one pupil, or ``None`` if a needed field is missing."""
    if pupil.school_id != school.school_id or pupil.la_id != school.la_id:
        raise SchemaError("pupil does not belong to the given school")
    row = {**asdict(school), **asdict(pupil)}
    X, complete = encode_frame(pd.DataFrame([row]), spec.fixed_terms)
    return X[0] if complete[0] else None


@dataclass(frozen=True, eq=False)
class DesignMatrices:
    """Outcome, fixed design and grouping, rows sorted by (LA, school).

    LAs are ordered by id; schools within an LA by first appearance in the
    input, so relabelling school ids (e.g. pseudonymisation) leaves every
    array unchanged.  ``school_index`` is monotone non-decreasing.
    """

    y: np.ndarray
    X: np.ndarray
    term_names: tuple[str, ...]
    la_index: np.ndarray
    school_index: np.ndarray
    la_ids: np.ndarray
    school_ids: np.ndarray
    school_la: np.ndarray
    z_la_cols: tuple[int, ...]
    z_school_cols: tuple[int, ...]
    spec: ModelSpec
    pupil_ids: np.ndarray | None = None
    n_dropped: int = 0

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q_la(self) -> int:
        return len(self.z_la_cols)

    @property
    def q_school(self) -> int:
        return len(self.z_school_cols)

    @property
    def n_las(self) -> int:
        return len(self.la_ids)

    @property
    def n_schools(self) -> int:
        return len(self.school_ids)

    @property
    def Z_la(self) -> np.ndarray:
        return self.X[:, list(self.z_la_cols)]

    @property
    def Z_school(self) -> np.ndarray:
        return self.X[:, list(self.z_school_cols)]

    def la_slices(self) -> list[slice]:
        bounds = np.searchsorted(self.la_index, np.arange(self.n_las + 1))
        return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]

    def school_slices(self) -> list[slice]:
        bounds = np.searchsorted(self.school_index, np.arange(self.n_schools + 1))
        return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]

    def with_outcome(self, y) -> "DesignMatrices":
        """Same design with a replacement outcome vector (already sorted)."""
        y = np.asarray(y, dtype=float)
        if y.shape != self.y.shape:
            raise ValueError("outcome has the wrong length")
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw["y"] = y
        return DesignMatrices(**kw)

    @classmethod
    def from_arrays(cls, y, X, la, school, term_names, random_blocks, pupil_ids=None):
        """Build from raw arrays; ``school`` labels are interpreted within LA."""
        y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[1] != len(term_names):
            raise SchemaError("inconsistent design dimensions")
        if y.size == 0:
            raise SchemaError("empty data")
        spec = ModelSpec(tuple(term_names), random_blocks, "none")
        return _assemble(y, X, np.asarray(la), np.asarray(school), spec, pupil_ids, 0)


def _assemble(y, X, la, school, spec, pupil_ids, n_dropped):
    la_codes, la_ids = pd.factorize(pd.Series(la), sort=True)
    pair = pd.Series(list(zip(la_codes, pd.Series(school).astype(str))))
    first_code, pair_uniques = pd.factorize(pair, sort=False)
    pair_la = np.array([u[0] for u in pair_uniques])
    pair_label = np.array([u[1] for u in pair_uniques], dtype=object)
    # schools ordered by (LA, first appearance)
    school_order = np.lexsort((np.arange(len(pair_uniques)), pair_la))
    rank = np.empty_like(school_order)
    rank[school_order] = np.arange(len(school_order))
    school_codes = rank[first_code]
    order = np.lexsort((np.arange(len(y)), school_codes, la_codes))
    terms = spec.fixed_terms
    return DesignMatrices(
        y=y[order],
        X=X[order],
        term_names=terms,
        la_index=la_codes[order],
        school_index=school_codes[order],
        la_ids=np.asarray(la_ids, dtype=object),
        school_ids=pair_label[school_order],
        school_la=pair_la[school_order],
        z_la_cols=tuple(terms.index(t) for t in spec.random_terms("la")),
        z_school_cols=tuple(terms.index(t) for t in spec.random_terms("school")),
        spec=spec,
        pupil_ids=None if pupil_ids is None else np.asarray(pupil_ids, dtype=object)[order],
        n_dropped=n_dropped,
    )


def _as_frame(records, fields) -> pd.DataFrame:
    if isinstance(records, pd.DataFrame):
        return records
    rows = [asdict(r) if hasattr(r, "__dataclass_fields__") else dict(r) for r in records]
    return pd.DataFrame(rows, columns=list(fields))


def merge_pupils_schools(pupils, schools) -> pd.DataFrame:
    pupils = _as_frame(pupils, PUPIL_FIELDS)
    schools = _as_frame(schools, SCHOOL_FIELDS)
    if schools["school_id"].duplicated().any():
        raise SchemaError("duplicate school_id in school table")
    sch = schools.set_index("school_id")
    known = pupils["school_id"].isin(sch.index)
    if not known.all():
        bad = pupils.loc[~known, "school_id"].iloc[0]
        raise SchemaError(f"pupil references unknown school {bad!r}")
    school_cols = [c for c in SCHOOL_FIELDS if c not in ("school_id", "la_id") and c in sch]
    merged = pupils.join(sch[school_cols + ["la_id"]].rename(columns={"la_id": "_school_la"}),
                         on="school_id")
    if (merged["_school_la"].astype(str) != merged["la_id"].astype(str)).any():
        raise SchemaError("pupil la_id disagrees with its school's la_id")
    return merged.drop(columns="_school_la")


def build_design(pupils, schools, spec: ModelSpec) -> DesignMatrices:
    """Encode, drop incomplete rows (listwise) and sort into LA/school blocks."""
    pupils = _as_frame(pupils, PUPIL_FIELDS)
    if len(pupils) == 0:
        raise SchemaError("empty data")
    frame = merge_pupils_schools(pupils, schools)
    X, complete = encode_frame(frame, spec.fixed_terms)
    raw = frame["attainment8_raw"].to_numpy(float)
    complete &= ~np.isnan(raw)
    if not complete.any():
        raise SchemaError("no complete rows")
    raw = raw[complete]
    if spec.outcome_transform == "none":
        y = raw
    else:
        y = normalize_attainment8(raw, spec.outcome_transform)
    keep = frame.loc[complete]
    return _assemble(
        y, X[complete], keep["la_id"].to_numpy(), keep["school_id"].to_numpy(),
        spec, keep["pupil_id"].to_numpy(), int((~complete).sum()),
    )
