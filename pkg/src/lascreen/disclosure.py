"""Disclosure control for released microdata.

School identifiers are replaced by HMAC-SHA256 tokens under a secret key.
The same key always gives the same token, a different key gives unrelated
tokens, and no reverse mapping is produced or stored.  Schools with fewer
than ``suppress_threshold`` rows are then pooled under a single token.
"""
from __future__ import annotations

import hashlib
import hmac
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

KEY_ENV_VAR = "LASCREEN_RELEASE_KEY"
SUPPRESSED_TOKEN = "suppressed"
TOKEN_HEX_CHARS = 32  # 128 bits


@dataclass(frozen=True)
class ReleasePolicy:
    key: bytes = field(repr=False)
    suppress_threshold: int = 10
    fields_pseudonymized: tuple = ("school_id",)

    def __post_init__(self):
        if not isinstance(self.key, (bytes, bytearray)) or len(self.key) == 0:
            raise ValueError("release key must be a nonempty byte string")
        if int(self.suppress_threshold) < 0:
            raise ValueError("suppress_threshold must be non-negative")
        if tuple(self.fields_pseudonymized) != ("school_id",):
            raise ValueError("only school_id is pseudonymized; la_id stays in clear")


def load_key(key_file: str | os.PathLike | None = None, env_var: str = KEY_ENV_VAR) -> bytes:
    """Read the release key from ``key_file`` if given, else from ``env_var``."""
    if key_file is not None:
        key = Path(key_file).read_bytes().strip()
        source = f"key file {key_file}"
    else:
        key = os.environ.get(env_var, "").strip().encode()
        source = f"environment variable {env_var}"
    if not key:
        raise ValueError(f"no release key found in {source}")
    return key


def token(school_id: str, key: bytes) -> str:
    digest = hmac.new(key, str(school_id).encode("utf-8"), hashlib.sha256).hexdigest()
    return "S" + digest[:TOKEN_HEX_CHARS]


def pseudonymize(dataset: pd.DataFrame, policy: ReleasePolicy) -> pd.DataFrame:
    """Copy of ``dataset`` with ``school_id`` replaced by keyed tokens."""
    out = dataset.copy()
    ids = out["school_id"]
    uniq = pd.unique(ids.dropna())
    mapping = {u: token(u, policy.key) for u in uniq}
    out["school_id"] = ids.map(mapping).where(ids.notna(), ids).astype(object)
    return out


def suppress_small_cells(dataset: pd.DataFrame, policy: ReleasePolicy) -> tuple[pd.DataFrame, int]:
    """Pool schools with fewer than the threshold rows under one token.

    Returns the new frame (with a boolean ``suppressed`` column) and the
    number of schools suppressed.  LA identifiers are left in place.
    """
    out = dataset.copy()
    sizes = out.groupby("school_id", sort=False)["school_id"].transform("size").to_numpy()
    small = sizes < int(policy.suppress_threshold)
    n_schools = int(out.loc[small, "school_id"].nunique())
    if small.any():
        sid = out["school_id"].to_numpy(dtype=object).copy()
        sid[small] = SUPPRESSED_TOKEN
        out["school_id"] = sid
    out["suppressed"] = np.asarray(small, dtype=bool)
    return out, n_schools


def release(pupils: pd.DataFrame, schools: pd.DataFrame, policy: ReleasePolicy):
    """Pseudonymize and suppress a pupil/school pair for release.

    Suppressed schools' rows are kept in the pupil table under the pooled
    token; their school-level records are withheld from the school table.
    Returns ``(pupils, schools, n_suppressed_schools)``.
    """
    p = pseudonymize(pupils, policy)
    p, n_sup = suppress_small_cells(p, policy)
    s = pseudonymize(schools, policy)
    kept = set(p.loc[~p["suppressed"], "school_id"])
    s = s[s["school_id"].isin(kept)].reset_index(drop=True)
    return p, s, n_sup
