import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from survcate.data import (Cohort, Covariate, CovariateSchema, SurvivalRecord, TargetTime,
                           censoring_min_time, cohort_rows, complete_case_view,
                           ingest_cohort, ingest_covariates, read_cohort_csv, write_cohort_csv)
from survcate.exceptions import DataError

SCHEMA = CovariateSchema((Covariate("age"), Covariate("color", "categorical", ("red", "green"))))


def _rows():
    return [
        {"time": "4.5", "event": "1", "treatment": "0", "age": "61", "color": "red"},
        {"time": "10", "event": "0", "treatment": "1", "age": "47.5", "color": "green"},
        {"time": "2", "event": "1", "treatment": "1", "age": "70", "color": "red"},
    ]


def test_ingest_three_rows():
    c = ingest_cohort(_rows(), SCHEMA)
    assert c.n == 3
    assert c.design_matrix().shape == (3, 3)
    assert c.schema.encoded_names() == ["age", "color=red", "color=green"]


def test_negative_time_names_row():
    rows = _rows()
    rows[1]["time"] = "-1"
    with pytest.raises(DataError, match="row 2"):
        ingest_cohort(rows, SCHEMA)


def test_unknown_level_rejected():
    rows = _rows()
    rows[2]["color"] = "blue"
    with pytest.raises(DataError, match="row 3.*blue"):
        ingest_cohort(rows, SCHEMA)


@pytest.mark.parametrize("col,value", [("age", ""), ("event", "2"), ("treatment", "0.5"),
                                       ("time", "abc")])
def test_bad_values_rejected(col, value):
    rows = _rows()
    rows[0][col] = value
    with pytest.raises(DataError, match="row 1"):
        ingest_cohort(rows, SCHEMA)


def test_binary_level_check():
    schema = CovariateSchema((Covariate("s", "binary", (-1, 1)),))
    base = {"time": "1", "event": "1", "treatment": "1"}
    assert ingest_cohort([dict(base, s="-1")], schema).covariates[0, 0] == -1
    with pytest.raises(DataError):
        ingest_cohort([dict(base, s="0")], schema)


def test_schema_rejects_reserved_and_unknown_keys():
    with pytest.raises(DataError):
        CovariateSchema((Covariate("time"),))
    with pytest.raises(DataError):
        CovariateSchema.from_dict({"covariates": [{"name": "a"}], "extra": 1})
    d = SCHEMA.to_dict()
    assert CovariateSchema.from_dict(d) == SCHEMA


def test_cohort_arrays_read_only():
    c = ingest_cohort(_rows(), SCHEMA)
    with pytest.raises(ValueError):
        c.time[0] = 1.0


def test_ingest_covariates_ignores_outcomes():
    X = ingest_covariates([{"age": "3", "color": "green", "junk": "x"}], SCHEMA)
    np.testing.assert_array_equal(X, [[3.0, 0.0, 1.0]])


@pytest.mark.parametrize("u,d,inc,ind", [(10, 0, True, True), (3, 1, True, False),
                                         (3, 0, False, None), (5, 0, True, True)])
def test_complete_case_examples(u, d, inc, ind):
    c = Cohort(CovariateSchema.continuous(["x"]), [u], [d], [0], [[0.0]])
    view = complete_case_view(c, TargetTime(5))
    assert (view.n_complete == 1) == inc
    if inc:
        assert bool(view.survival_indicator[0]) == ind


@pytest.mark.parametrize("u,d,expected", [(3, True, 3), (10, False, 5), (5, True, 5)])
def test_censoring_min_time(u, d, expected):
    assert censoring_min_time(SurvivalRecord(u, d, 0), TargetTime(5)) == expected


def test_censoring_min_time_rejects_excluded():
    with pytest.raises(DataError):
        censoring_min_time(SurvivalRecord(3.0, False, 0), 5.0)


def test_target_time_validation_and_warning():
    with pytest.raises(DataError):
        TargetTime(0)
    c = Cohort(CovariateSchema.continuous(["x"]), [1.0, 2.0], [1, 0], [0, 1], [[0.0], [1.0]])
    with pytest.warns(UserWarning):
        TargetTime(3.0).check_against(c)


cohorts = st.integers(1, 30).flatmap(lambda n: st.tuples(
    st.lists(st.floats(0, 50, allow_nan=False), min_size=n, max_size=n),
    st.lists(st.booleans(), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
    st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=n, max_size=n)))


def _make(args):
    t, e, a, x = args
    return Cohort(CovariateSchema.continuous(["x"]), t, e, a, np.array(x)[:, None])


@settings(max_examples=80, deadline=None)
@given(cohorts, st.floats(0.01, 60))
def test_partition_property(args, t_star):
    c = _make(args)
    view = complete_case_view(c, t_star)
    included = np.zeros(c.n, bool)
    included[view.indices] = True
    excluded = ~c.event & (c.time < t_star)
    np.testing.assert_array_equal(included, ~excluded)
    np.testing.assert_array_equal(view.survival_indicator, c.time[view.indices] >= t_star)


@settings(max_examples=60, deadline=None)
@given(cohorts, st.floats(0.01, 30), st.floats(0.01, 30))
def test_survivor_subset_monotone(args, t1, t2):
    lo, hi = sorted((t1, t2))
    c = _make(args)
    surv = lambda t: set(complete_case_view(c, t).indices[complete_case_view(c, t).survival_indicator])
    assert surv(hi) <= surv(lo)


@settings(max_examples=60, deadline=None)
@given(cohorts)
def test_round_trip(args):
    c = _make(args)
    buf = io.StringIO()
    write_cohort_csv(c, buf)
    again = read_cohort_csv(io.StringIO(buf.getvalue()), c.schema)
    assert again == c
    assert ingest_cohort(cohort_rows(c), c.schema) == c
