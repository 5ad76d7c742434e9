import hypothesis.strategies as st
import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays

from eventstudy.errors import DataValidationError, DegenerateScaleError
from eventstudy.panel import (
    MISSING, Codebook, IngestReport, add_peer_means, filter_records, leave_one_out_mean, prepare_panel,
    read_students, standardize, write_students, zscore_by_group,
)

from conftest import make_records


def test_absent_day_two_dropped():
    df = make_records([{}, {"present_day2": 0}])
    rep = IngestReport()
    out = filter_records(df, report=rep)
    assert list(out["student_id"]) == ["s0"]
    assert rep.dropped["absent"] == 1


def test_zero_essay_dropped():
    out = filter_records(make_records([{}, {"essay_grade": 0}]))
    assert list(out["student_id"]) == ["s0"]


@pytest.mark.parametrize("year", [2011, 2012])
def test_gap_years_dropped(year):
    out = filter_records(make_records([{}, {"year": year}]))
    assert list(out["student_id"]) == ["s0"]


def test_missing_grade_dropped_and_reasons_exclusive():
    df = make_records([{}, {"grade_math": ""}, {"year": 2011, "present_day1": 0}])
    rep = IngestReport()
    filter_records(df, report=rep)
    assert rep.dropped == {"excluded_year": 1, "absent": 0, "zero_essay": 0, "missing_grade": 1}
    assert rep.rows_kept == 1


def test_filter_idempotent():
    df = make_records([{}, {"essay_grade": 0}, {"year": 2012}, {"present_day1": 0}, {"grade_nat": 300}])
    once = filter_records(df)
    assert filter_records(once).equals(once)


def test_missing_categorical_becomes_level():
    df = make_records([{"family_income": ""}])
    assert df["family_income"].iloc[0] == MISSING


def test_unknown_code_rejected():
    with pytest.raises(DataValidationError, match="race"):
        make_records([{"race": 9}])


def test_negative_grade_rejected():
    with pytest.raises(DataValidationError, match="grade_hum"):
        make_records([{"grade_hum": -1}])


def test_bad_year_rejected():
    with pytest.raises(DataValidationError):
        make_records([{"year": "20x0"}])


def test_two_point_standardization():
    df = make_records([{"grade_nat": g, "grade_hum": g, "grade_lang": g, "grade_math": g} for g in (400, 600)])
    assert list(standardize(df)["outcome"]) == [-1.0, 1.0]


def test_constant_year_is_degenerate():
    df = make_records([{}, {}])
    with pytest.raises(DegenerateScaleError):
        standardize(df)


def test_year_scope_isolated():
    a = make_records([{"grade_math": g} for g in (300, 500, 650)])
    b = make_records([{"grade_math": g} for g in (300, 500, 650)]
                     + [{"year": 2013, "grade_math": g} for g in (100, 900, 400, 420)])
    za = standardize(a)["outcome"].to_numpy()
    zb = standardize(b)["outcome"].to_numpy()[:3]
    np.testing.assert_array_equal(za, zb)


def test_pooled_scope():
    df = make_records([{"grade_math": 300}, {"grade_math": 500, "year": 2013}])
    assert list(standardize(df, scope="pooled")["outcome"]) == [-1.0, 1.0]
    with pytest.raises(ValueError):
        standardize(df, scope="decade")


@settings(max_examples=50)
@given(arrays(float, st.integers(3, 60), elements=st.floats(0, 1000)), st.integers(1, 4))
def test_standardize_idempotent(x, n_groups):
    groups = np.arange(len(x)) % n_groups
    try:
        z = zscore_by_group(x, groups)
    except DegenerateScaleError:
        return
    np.testing.assert_allclose(zscore_by_group(z, groups), z, atol=1e-12)


def test_leave_one_out_fixtures():
    assert leave_one_out_mean([1, 2, 3], 0) == 2.5
    assert leave_one_out_mean([4.25, -7.0], 0) == -7.0
    with pytest.raises(ValueError):
        leave_one_out_mean([1.0], 0)


def test_leave_one_out_random_group(rng):
    g = rng.normal(size=50)
    for i in (0, 17, 49):
        oracle = sum(v for j, v in enumerate(g) if j != i) / 49
        assert leave_one_out_mean(g, i) == pytest.approx(oracle, abs=1e-13)
        assert leave_one_out_mean(g, i) == pytest.approx((50 * g.mean() - g[i]) / 49, abs=1e-13)


def _with_outcome(sizes, rng):
    rows = []
    for m, n in enumerate(sizes):
        rows += [{"municipality_id": f"M{m}"} for _ in range(n)]
    df = make_records(rows)
    df["outcome"] = rng.normal(size=len(df))
    return df


def test_peer_means_drop_singletons(rng):
    rep = IngestReport()
    out = add_peer_means(_with_outcome([3, 1, 2], rng), rep)
    assert rep.singletons_dropped == 1
    assert set(out["municipality_id"]) == {"M0", "M2"}


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(2, 12), min_size=1, max_size=6), st.integers(0, 2**31))
def test_peer_mean_deviation_identity(sizes, seed):
    out = add_peer_means(_with_outcome(sizes, np.random.default_rng(seed)))
    for _, cell in out.groupby("municipality_id"):
        n = len(cell)
        s = ((cell["outcome"] - cell["peer_mean"]) * (n - 1) / n).sum()
        assert abs(s) <= 1e-9


def test_prepare_and_round_trip(tmp_path, small_sim, codebook):
    path = tmp_path / "students.csv"
    write_students(small_sim.records, path)
    df, rep = read_students(path, codebook, chunksize=997)
    assert rep.rows_read == len(small_sim.records)
    pd.testing.assert_frame_equal(df, small_sim.records.reset_index(drop=True)[df.columns], check_dtype=False)
    out = prepare_panel(df, report=rep)
    assert not out["year"].isin([2011, 2012]).any()
    assert np.isfinite(out["outcome"]).all()
    assert rep.rows_kept + sum(rep.dropped.values()) == rep.rows_read


def test_unreadable_and_wrong_header(tmp_path, codebook):
    with pytest.raises(DataValidationError):
        read_students(tmp_path / "missing.csv", codebook)
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(DataValidationError, match="header"):
        read_students(p, codebook)


def test_codebook_validation():
    with pytest.raises(DataValidationError):
        Codebook.from_dict({"columns": {}})
    d = Codebook.load().to_dict()
    d["columns"]["race"]["reference"] = "9"
    with pytest.raises(DataValidationError):
        Codebook.from_dict(d)
