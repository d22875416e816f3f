import math

import numpy as np
import pandas as pd
import pytest

from conftest import small_config
from lascreen.errors import InfeasibleBudgetError, SchemaError
from lascreen.mclab import OC_COLUMNS, OCConfig, OCResult, choose_threshold, run_oc

BASE = small_config(omega_la=((0.0,),), n_las=12)


def _cfg(**kw):
    args = dict(base=BASE, offsets=(0.0, 0.3), n_planted=4, n_grid=(40, 80),
                confidence_grid=(0.90, 0.95), replications=2, seed=5,
                fixed_terms=("intercept", "ks2c", "fsm"))
    return OCConfig(**{**args, **kw})


@pytest.fixture(scope="module")
def small_oc():
    return run_oc(_cfg())


def test_shape_and_bounds(small_oc):
    t = small_oc.table
    assert list(t.columns[:8]) == OC_COLUMNS
    assert len(t) == 2 * 2 * 2
    ok = t["fpr"].dropna()
    assert ((ok >= 0) & (ok <= 1)).all()
    assert t.loc[t["offset"] == 0, "fnr"].isna().all()
    assert small_oc.attrition == 0


def test_mean_flags_monotone_in_confidence(small_oc):
    runs = small_oc.runs
    wide = runs.pivot_table(index=["offset", "n", "replication"], columns="confidence", values="flags")
    assert (wide[0.90] >= wide[0.95]).all()


def test_deterministic(small_oc):
    again = run_oc(_cfg())
    pd.testing.assert_frame_equal(again.table, small_oc.table)


def test_grid_change_leaves_other_cells(small_oc):
    only = run_oc(_cfg(n_grid=(80,), offsets=(0.3,), confidence_grid=(0.95,)))
    mine = small_oc.runs
    sel = mine[(mine["n"] == 80) & (mine["offset"] == 0.3) & (mine["confidence"] == 0.95)]
    pd.testing.assert_frame_equal(only.runs.reset_index(drop=True), sel.reset_index(drop=True))


def test_huge_offset_always_found():
    oc = run_oc(_cfg(offsets=(10.0,), n_grid=(60,), confidence_grid=(0.95,), replications=2))
    assert oc.table["fnr"].iloc[0] == 0.0


def test_exports(small_oc, tmp_path):
    small_oc.to_csv(tmp_path / "oc.csv")
    back = pd.read_csv(tmp_path / "oc.csv")
    assert list(back.columns[:8]) == OC_COLUMNS
    assert '"cells"' in small_oc.to_json()


def test_config_validation():
    with pytest.raises(SchemaError):
        _cfg(replications=0).validate()
    with pytest.raises(SchemaError):
        _cfg(n_grid=()).validate()
    with pytest.raises(SchemaError):
        _cfg(offsets=(-0.1,)).validate()
    with pytest.raises(SchemaError):
        _cfg(term="ks2c").validate()
    cfg = _cfg()
    assert OCConfig.from_dict(cfg.to_dict()) == cfg


def _oc(rows):
    table = pd.DataFrame(rows, columns=["n", "confidence", "offset", "fpr", "fnr", "mean_flags"])
    table["se_fpr"] = table["se_fnr"] = 0.0
    return OCResult(table[OC_COLUMNS], pd.DataFrame(), _cfg())


GRID = [
    (100, 0.90, 0.2, 0.06, 0.30, 9.0),
    (100, 0.95, 0.2, 0.03, 0.40, 5.0),
    (250, 0.90, 0.2, 0.06, 0.10, 12.0),
    (250, 0.95, 0.2, 0.03, 0.20, 8.0),
]


def test_choose_unlimited_budget_min_fnr():
    assert choose_threshold(_oc(GRID), budget=math.inf, w_fp=0.0) == (250, 0.90)


def test_choose_with_budget():
    assert choose_threshold(_oc(GRID), budget=8.5) == (250, 0.95)
    assert choose_threshold(_oc(GRID), budget=5.0) == (100, 0.95)


def test_choose_ties_prefer_small_n_then_high_confidence():
    rows = [(250, 0.95, 0.1, 0.05, 0.2, 1.0), (100, 0.90, 0.1, 0.05, 0.2, 1.0),
            (100, 0.95, 0.1, 0.05, 0.2, 1.0)]
    assert choose_threshold(_oc(rows)) == (100, 0.95)


def test_choose_infeasible_budget():
    with pytest.raises(InfeasibleBudgetError) as err:
        choose_threshold(_oc(GRID), budget=0)
    assert err.value.min_expected_flags == 5.0
    rows = GRID + [(50, 0.99, 0.2, 0.0, 1.0, 0.0)]
    assert choose_threshold(_oc(rows), budget=0) == (50, 0.99)


def test_choose_is_stable(small_oc):
    assert choose_threshold(small_oc) == choose_threshold(small_oc)
