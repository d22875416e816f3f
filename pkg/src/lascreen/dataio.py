"""CSV/JSON reading and writing with schema validation.

Files are UTF-8 with a header row and LF line endings.  Floats are written
with 17 significant digits so a write/read round trip is exact.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import SchemaError
from .model import (
    ADMISSIONS, DENOMINATIONS, ETHNICITIES, GENDER_MIXES, GENDERS, N_KS2_GROUPS,
    PUPIL_FIELDS, SCHOOL_FIELDS, SEN_LEVELS,
)

TRUE_STRINGS = {"True": True, "true": True, "1": True, "False": False, "false": False, "0": False}
RELEASE_EXTRA = ("suppressed",)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_csv(frame: pd.DataFrame, path) -> None:
    frame.to_csv(path, index=False, lineterminator="\n", float_format="%.17g", encoding="utf-8")


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc.msg})") from exc


def _check_columns(frame, expected, path, optional=()):
    cols = list(frame.columns)
    unknown = [c for c in cols if c not in expected and c not in optional]
    missing = [c for c in expected if c not in cols]
    if unknown:
        raise SchemaError(f"{path}: unknown column(s) {unknown}")
    if missing:
        raise SchemaError(f"{path}: missing column(s) {missing}")


def _numeric(frame, col, path, integer=False):
    try:
        v = pd.to_numeric(frame[col], errors="raise")
    except (ValueError, TypeError) as exc:
        raise SchemaError(f"{path}: column {col!r} is not numeric") from exc
    if integer:
        if (v != np.round(v)).any():
            raise SchemaError(f"{path}: column {col!r} must hold integers")
        v = v.astype(np.int64)
    return v


def _enum(frame, col, allowed, path, allow_missing=False):
    v = frame[col]
    ok = v.isin(allowed)
    if allow_missing:
        ok |= v.isna()
    if not ok.all():
        raise SchemaError(f"{path}: column {col!r} has value {v[~ok].iloc[0]!r} outside {list(allowed)}")


def _in_unit(frame, col, path):
    if ((frame[col] < 0) | (frame[col] > 1)).any():
        raise SchemaError(f"{path}: column {col!r} outside [0, 1]")


def _bool(frame, col, path):
    v = frame[col].map(TRUE_STRINGS)
    if v.isna().any():
        raise SchemaError(f"{path}: column {col!r} must be boolean")
    return v.astype(bool)


def read_pupils(path, release: bool = False) -> pd.DataFrame:
    """Read and validate a pupil CSV (``release`` allows the ``suppressed`` column)."""
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    _check_columns(frame, PUPIL_FIELDS, path, RELEASE_EXTRA if release else ())
    validate_pupils_frame(frame, path, parse=True)
    for c in ("ks2_group",):
        frame[c] = _numeric(frame, c, path, integer=True)
    for c in ("ks2_score", "attainment8_raw", "idaci_pupil"):
        frame[c] = _numeric(frame, c, path)
    for c in ("eal", "fsm") + (("suppressed",) if "suppressed" in frame else ()):
        frame[c] = _bool(frame, c, path)
    eth = frame["ethnicity"].to_numpy(dtype=object)
    eth[eth == ""] = None
    frame["ethnicity"] = eth
    validate_pupils_frame(frame, path)
    return frame


def validate_pupils_frame(frame: pd.DataFrame, path="pupils", parse=False) -> None:
    if parse:
        for c in ("pupil_id", "la_id", "school_id"):
            if (frame[c] == "").any():
                raise SchemaError(f"{path}: empty {c}")
        return
    if frame["pupil_id"].duplicated().any():
        raise SchemaError(f"{path}: duplicate pupil_id")
    g = frame["ks2_group"]
    if ((g < 1) | (g > N_KS2_GROUPS)).any():
        raise SchemaError(f"{path}: ks2_group outside 1..{N_KS2_GROUPS}")
    _in_unit(frame, "idaci_pupil", path)
    _enum(frame, "gender", GENDERS, path)
    _enum(frame, "ethnicity", ETHNICITIES, path, allow_missing=True)
    _enum(frame, "sen", SEN_LEVELS, path)


def read_schools(path) -> pd.DataFrame:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    _check_columns(frame, SCHOOL_FIELDS, path)
    frame["idaci_school"] = _numeric(frame, "idaci_school", path)
    frame["region"] = _numeric(frame, "region", path, integer=True)
    validate_schools_frame(frame, path)
    return frame


def validate_schools_frame(frame: pd.DataFrame, path="schools") -> None:
    if frame["school_id"].duplicated().any():
        raise SchemaError(f"{path}: duplicate school_id")
    _enum(frame, "admissions", ADMISSIONS, path)
    _enum(frame, "gender_mix", GENDER_MIXES, path)
    _enum(frame, "denomination", DENOMINATIONS, path)
    _in_unit(frame, "idaci_school", path)
    if ((frame["region"] < 1) | (frame["region"] > 9)).any():
        raise SchemaError(f"{path}: region outside 1..9")


def validate_membership(pupils: pd.DataFrame, schools: pd.DataFrame, path="pupils") -> None:
    """Every pupil's school exists and lies in the pupil's LA."""
    sch = schools.set_index("school_id")["la_id"]
    known = pupils["school_id"].isin(sch.index)
    if not known.all():
        raise SchemaError(f"{path}: unknown school {pupils.loc[~known, 'school_id'].iloc[0]!r}")
    if (sch.loc[pupils["school_id"]].to_numpy() != pupils["la_id"].to_numpy()).any():
        raise SchemaError(f"{path}: pupil la_id disagrees with its school's la_id")


def read_frame(path, columns) -> pd.DataFrame:
    """Generic CSV with an exact header check (for derived outputs)."""
    frame = pd.read_csv(path, keep_default_na=False, encoding="utf-8")
    _check_columns(frame, columns, path)
    return frame
