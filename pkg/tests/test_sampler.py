import json

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from conftest import small_config
from lascreen.errors import SchemaError
from lascreen.sampler import (
    SampleDesign, attach_weights, draw_sample, equal_per_school, srs_per_la,
)
from lascreen.synthgen import generate_population


def _toy(sizes_by_la):
    rows = []
    for la, sizes in sizes_by_la.items():
        for j, m in enumerate(sizes):
            rows += [(f"{la}-p{j}-{i}", la, f"{la}-s{j}") for i in range(m)]
    return pd.DataFrame(rows, columns=["pupil_id", "la_id", "school_id"])


def test_srs_counts_and_exclusions():
    pupils = _toy({"A": [400, 300, 100], "B": [60, 60], "C": [22]})
    s = srs_per_la(pupils, SampleDesign("srs_per_la", 250, 100, seed=1))
    counts = s.selection.groupby("la_id").size().to_dict()
    assert counts == {"A": 250, "B": 120}
    assert [e["la_id"] for e in s.exclusions] == ["C"]
    assert s.selection["pupil_id"].is_unique
    assert s.n_las == 2


def test_srs_weights():
    pupils = _toy({"A": [1000, 1500], "B": [80, 70]})
    s = srs_per_la(pupils, SampleDesign("srs", 250, 100, seed=3))
    w = s.selection.groupby("la_id")["weight"].unique()
    assert list(w["A"]) == [10.0]
    assert list(w["B"]) == [1.0]


def test_srs_exhaustive_when_target_large():
    pupils = _toy({"A": [120, 30], "B": [200]})
    s = srs_per_la(pupils, SampleDesign("srs", 10_000, 100, seed=0))
    assert set(s.selection["pupil_id"]) == set(pupils["pupil_id"])
    assert (s.selection["weight"] == 1.0).all()


def test_equal_quota_ten_schools():
    pupils = _toy({"A": [200] * 10})
    s = equal_per_school(pupils, SampleDesign("equal", 250, 100, seed=2))
    assert int(s.la_counts.loc[0, "quota"]) == 25
    assert (s.selection.groupby("school_id").size() == 25).all()
    assert (s.selection["weight"] == 8.0).all()


def test_equal_quota_rounding_and_floor():
    pupils = _toy({"A": [50] * 4, "B": [30] * 300, "C": [40] * 12})
    s = equal_per_school(pupils, SampleDesign("equal", 250, 100, seed=2))
    q = s.la_counts.set_index("la_id")["quota"].to_dict()
    assert q == {"A": 63, "B": 1, "C": 21}
    totals = s.selection.groupby("la_id").size()
    assert totals["A"] == 200
    assert totals["C"] == 252


def test_equal_census_when_schools_small():
    pupils = _toy({"A": [5, 8, 12, 90]})
    s = equal_per_school(pupils, SampleDesign("equal", 400, 0, seed=0))
    assert len(s.selection) == len(pupils)


def test_design_b_total_within_school_count(small_population):
    s = equal_per_school(small_population, SampleDesign("equal", 100, 50, seed=4))
    sizes = small_population.pupils.groupby("school_id").size()
    la_of = small_population.schools.set_index("school_id")["la_id"]
    for r in s.la_counts[s.la_counts["n_sampled"] > 0].itertuples():
        own = sizes[la_of[sizes.index] == r.la_id]
        assert r.n_sampled == np.minimum(own, r.quota).sum()
        if (own >= r.quota).all():
            assert abs(r.n_sampled - 100) <= r.n_schools


def test_determinism_and_seed(small_population):
    d = SampleDesign("srs", 80, 50, seed=9)
    a = draw_sample(small_population, d).selection
    b = draw_sample(small_population, d).selection
    pd.testing.assert_frame_equal(a, b)
    c = draw_sample(small_population, SampleDesign("srs", 80, 50, seed=10)).selection
    assert not a["pupil_id"].equals(c["pupil_id"])


def test_wrong_kind_and_empty():
    pupils = _toy({"A": [200]})
    with pytest.raises(SchemaError):
        srs_per_la(pupils, SampleDesign("equal"))
    with pytest.raises(SchemaError):
        srs_per_la(pupils.iloc[:0], SampleDesign("srs"))
    with pytest.raises(SchemaError):
        SampleDesign("srs", target_per_la=0)


def test_attach_weights_rejects_foreign_population():
    s = srs_per_la(_toy({"A": [200]}), SampleDesign("srs", 50, 10, seed=1))
    with pytest.raises(SchemaError):
        attach_weights(s, _toy({"B": [200]}))


def test_audit_export(tmp_path):
    pupils = _toy({"A": [150, 150], "C": [22]})
    s = equal_per_school(pupils, SampleDesign("equal", 250, 100, seed=5))
    audit = json.loads(s.audit_json())
    assert audit["quotas"] == {"A": 125}
    assert audit["exclusions"][0]["la_id"] == "C"
    s.to_csv(tmp_path / "s.csv")
    back = pd.read_csv(tmp_path / "s.csv")
    assert list(back.columns) == ["pupil_id", "la_id", "school_id", "weight"]


def test_uniform_inclusion_within_la():
    pupils = _toy({"A": [30, 20, 10]})
    hits = np.zeros(60)
    idx = {p: i for i, p in enumerate(pupils["pupil_id"])}
    R = 400
    for r in range(R):
        s = srs_per_la(pupils, SampleDesign("srs", 15, 0, seed=r))
        hits[[idx[p] for p in s.selection["pupil_id"]]] += 1
    expected = np.full(60, R * 15 / 60)
    chi2 = ((hits - expected) ** 2 / expected).sum()
    # without-replacement draws make the statistic conservative
    assert stats.chi2.sf(chi2, df=59) > 0.01


def test_schools_sampled_proportional_to_size():
    sizes = [10, 20, 40, 80, 150]
    pupils = _toy({"A": sizes})
    counts = np.zeros(len(sizes))
    R = 300
    for r in range(R):
        s = srs_per_la(pupils, SampleDesign("srs", 30, 0, seed=r))
        per = s.selection.groupby("school_id").size()
        counts += np.array([per.get(f"A-s{j}", 0) for j in range(len(sizes))])
    x = np.array(sizes) * 30 / sum(sizes)
    slope = (x @ (counts / R)) / (x @ x)
    assert abs(slope - 1) < 0.02


def test_tiny_la_under_both_designs():
    pop = generate_population(small_config(seed=4, tiny_la_size=22))
    for kind in ("srs", "equal"):
        s = draw_sample(pop, SampleDesign(kind, 250, 100, seed=1))
        assert s.n_las == 11
        assert s.exclusions[0]["n_population"] == 22
    s = draw_sample(pop, SampleDesign("srs", 250, 0, seed=1))
    assert s.n_las == 12
