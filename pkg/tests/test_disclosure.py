import re

import numpy as np
import pandas as pd
import pytest

import lascreen.disclosure as disclosure
from lascreen.disclosure import (
    SUPPRESSED_TOKEN, ReleasePolicy, load_key, pseudonymize, release, suppress_small_cells, token,
)
from lascreen.estimator import fit
from lascreen.model import build_design, model_preset

KEY = b"k" * 32


def _frame(sizes):
    rows = [{"school_id": f"SCH{j:05d}", "la_id": "LA001", "v": i}
            for j, s in enumerate(sizes) for i in range(s)]
    return pd.DataFrame(rows)


def test_token_format_and_determinism():
    t = token("SCH00001", KEY)
    assert re.fullmatch(r"S[0-9a-f]{32}", t)
    assert t == token("SCH00001", KEY)
    assert t != token("SCH00002", KEY)


def test_different_keys_unrelated():
    ids = [f"SCH{j:05d}" for j in range(500)]
    a = {token(i, KEY) for i in ids}
    b = {token(i, b"another key") for i in ids}
    assert not a & b
    assert len(a) == 500


def test_pseudonymize_keeps_la_and_structure():
    df = _frame([3, 4])
    out = pseudonymize(df, ReleasePolicy(KEY))
    assert (out["la_id"] == df["la_id"]).all()
    assert out["school_id"].nunique() == 2
    assert not out["school_id"].isin(df["school_id"]).any()
    assert (df["school_id"] == _frame([3, 4])["school_id"]).all()  # input untouched


@pytest.mark.parametrize("size,suppressed", [(9, True), (10, False)])
def test_threshold_boundary(size, suppressed):
    df, n = suppress_small_cells(_frame([size, 20]), ReleasePolicy(KEY, suppress_threshold=10))
    assert n == int(suppressed)
    assert df["suppressed"].sum() == (size if suppressed else 0)
    assert (df.loc[df["suppressed"], "school_id"] == SUPPRESSED_TOKEN).all()


def test_threshold_zero_suppresses_nothing():
    df, n = suppress_small_cells(_frame([1, 2]), ReleasePolicy(KEY, suppress_threshold=0))
    assert n == 0 and not df["suppressed"].any()


def test_policy_validation():
    with pytest.raises(ValueError):
        ReleasePolicy(b"")
    with pytest.raises(ValueError):
        ReleasePolicy(KEY, suppress_threshold=-1)
    with pytest.raises(ValueError):
        ReleasePolicy(KEY, fields_pseudonymized=("la_id",))
    assert "kkkk" not in repr(ReleasePolicy(KEY))


def test_load_key(tmp_path, monkeypatch):
    f = tmp_path / "key"
    f.write_bytes(b"secret\n")
    assert load_key(f) == b"secret"
    monkeypatch.setenv(disclosure.KEY_ENV_VAR, "from-env")
    assert load_key() == b"from-env"
    monkeypatch.delenv(disclosure.KEY_ENV_VAR)
    with pytest.raises(ValueError):
        load_key()


def test_no_reverse_mapping_exposed():
    public = {n for n in dir(disclosure) if not n.startswith("_")}
    assert not any(w in n.lower() for n in public for w in ("reverse", "decode", "unmask", "lookup"))


def test_release_withholds_suppressed_schools(small_population):
    pop = small_population
    policy = ReleasePolicy(KEY, suppress_threshold=30)
    p, s, n = release(pop.pupils, pop.schools, policy)
    sizes = pop.pupils.groupby("school_id").size()
    assert n == int((sizes < 30).sum())
    assert len(s) == len(pop.schools) - n
    assert set(s["school_id"]) == set(p.loc[~p["suppressed"], "school_id"])
    assert len(p) == len(pop.pupils)


def test_pseudonymized_fit_bit_identical(small_population):
    pop = small_population
    spec = model_preset("table1")
    spec = type(spec)(("intercept", "ks2c", "fsm"), spec.random_blocks)
    policy = ReleasePolicy(KEY, suppress_threshold=0)
    a = fit(build_design(pop.pupils, pop.schools, spec), spec)
    pp = pseudonymize(pop.pupils, policy)
    ps = pseudonymize(pop.schools, policy)
    b = fit(build_design(pp, ps, spec), spec)
    assert a.minus2ll == b.minus2ll
    np.testing.assert_array_equal(a.beta, b.beta)
    np.testing.assert_array_equal(a.omega_school, b.omega_school)
    np.testing.assert_array_equal(a.se_beta, b.se_beta)
    assert a.sigma2 == b.sigma2
