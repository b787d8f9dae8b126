import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from longbayes.summary import (ActivationRecord, activation_area, read_records,
                               reliability_stats, subject_stats, write_records)


def test_activation_area_examples():
    assert activation_area([True, True], [2.0, 3.0]) == 5.0
    assert activation_area([False, False], [2.0, 3.0]) == 0.0
    va = np.array([0.5, 1.5, 2.25])
    assert activation_area(np.ones(3, bool), va) == pytest.approx(va.sum())


def test_activation_area_length_mismatch():
    with pytest.raises(ValueError):
        activation_area([True], [1.0, 2.0])


def test_subject_stats_examples():
    assert subject_stats([10, 10, 10]) == (10.0, 0.0, 0.0)
    m, s, cv = subject_stats([1, 2, 3])
    assert (m, s, cv) == (2.0, 1.0, 0.5)
    assert np.isnan(subject_stats([0, 0])[2])
    with pytest.raises(ValueError):
        subject_stats([1.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.1, 1e4), min_size=2, max_size=8), st.floats(1e-3, 1e3))
def test_cv_scale_invariant(areas, c):
    assert subject_stats(np.array(areas) * c)[2] == pytest.approx(subject_stats(areas)[2],
                                                                  rel=1e-9, abs=1e-12)


def records_for(areas_by_subject, method="bayes", gamma=0.0):
    return [ActivationRecord(sid, str(j + 1), method, gamma, "left", a)
            for sid, areas in areas_by_subject.items() for j, a in enumerate(areas)]


def test_reliability_between_cv_definition(rng):
    areas = {f"s{i}": list(rng.uniform(50, 150, size=4)) for i in range(6)}
    per_subject, per_method = reliability_stats(records_for(areas))
    means = np.array([np.mean(a) for a in areas.values()])
    sds = np.array([np.std(a, ddof=1) for a in areas.values()])
    row = per_method[0]
    assert row["between_cv"] == pytest.approx(np.std(means, ddof=1) / np.mean(means), rel=1e-12)
    assert row["median_within_cv"] == pytest.approx(np.median(sds / means), rel=1e-12)
    slope, intercept = np.polyfit(means, sds, 1)
    assert row["sd_mean_slope"] == pytest.approx(slope)
    assert row["sd_mean_intercept"] == pytest.approx(intercept)
    assert len(per_subject) == 6


def test_reliability_groups_by_method_and_gamma():
    recs = records_for({"a": [1, 2], "b": [3, 5]}) + \
        records_for({"a": [1, 1], "b": [2, 4]}, method="classical-fdr")
    _, per_method = reliability_stats(recs)
    assert {(r["method"], r["gamma"]) for r in per_method} == {("bayes", 0.0),
                                                               ("classical-fdr", 0.0)}


def test_zero_mean_subject_cv_missing():
    per_subject, per_method = reliability_stats(records_for({"a": [0, 0], "b": [1, 3]}))
    assert np.isnan(per_subject[0]["within_cv"])
    assert per_method[0]["median_within_cv"] == pytest.approx(np.std([1, 3], ddof=1) / 2)


def test_records_roundtrip(tmp_path):
    recs = records_for({"a": [1.5, 2.25]}, method="classical-bonferroni", gamma=1.0)
    write_records(tmp_path / "r.csv", recs)
    assert read_records(tmp_path / "r.csv") == recs
