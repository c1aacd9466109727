from __future__ import annotations

import csv
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from harenctc.analysis import (
    AnalysisConfig,
    ExpectedCountWarning,
    UndefinedTestError,
    chi2_sf_df1,
    chi_square_2x2,
    null_false_positive_rate,
    sample_recordings,
    significance_report,
    usage_stats,
)


def _closed_form(a, b, c, d):
    # independent oracle: sum over cells of (observed - expected)^2 / expected
    table = np.array([[a, b], [c, d]], dtype=float)
    expected = table.sum(1, keepdims=True) * table.sum(0, keepdims=True) / table.sum()
    return float(((table - expected) ** 2 / expected).sum())


def test_chi_square_examples():
    assert chi_square_2x2([[50, 50], [50, 50]]) == (0.0, 1.0)
    stat, p = chi_square_2x2([[30, 70], [10, 90]])
    assert stat == pytest.approx(12.5, abs=1e-9)
    assert p == pytest.approx(math.erfc(math.sqrt(6.25)), rel=1e-12)
    assert chi_square_2x2(30, 70, 10, 90) == (stat, p)


def test_p_value_at_critical_point():
    assert chi2_sf_df1(3.841) == pytest.approx(0.05, abs=5e-4)
    assert chi2_sf_df1(0.0) == 1.0
    # tabulated 1-d.o.f. critical values
    assert chi2_sf_df1(6.635) == pytest.approx(0.01, abs=5e-5)
    assert chi2_sf_df1(10.828) == pytest.approx(0.001, abs=5e-6)


counts = st.integers(1, 500)


@given(counts, counts, counts, counts)
def test_chi_square_matches_cell_oracle_and_symmetries(a, b, c, d):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExpectedCountWarning)
        stat, p = chi_square_2x2(a, b, c, d)
        assert stat == pytest.approx(_closed_form(a, b, c, d), rel=1e-9, abs=1e-9)
        for table in ((c, d, a, b), (b, a, d, c), (a, c, b, d)):
            assert chi_square_2x2(*table)[0] == pytest.approx(stat, rel=1e-12, abs=1e-12)
        s3, p3 = chi_square_2x2(3 * a, 3 * b, 3 * c, 3 * d)
    assert s3 == pytest.approx(3 * stat, rel=1e-9, abs=1e-9)
    assert p3 <= p + 1e-15
    assert 0.0 <= p <= 1.0


@given(st.floats(0, 50), st.floats(0, 50))
def test_p_value_decreasing(x, y):
    if x < y:
        assert chi2_sf_df1(x) >= chi2_sf_df1(y)


def test_chi_square_errors_and_warning():
    with pytest.raises(UndefinedTestError):
        chi_square_2x2(0, 0, 5, 5)
    with pytest.raises(UndefinedTestError):
        chi_square_2x2(0, 5, 0, 5)
    with pytest.raises(ValueError):
        chi_square_2x2(-1, 5, 5, 5)
    with pytest.warns(ExpectedCountWarning, match="expected count"):
        chi_square_2x2(1, 9, 2, 8)


def test_usage_identical_groups_have_zero_difference():
    tokens = [0, 1, 1, 2, 2, 2]
    usage = usage_stats({"ND": tokens, "D": tokens[::-1]})
    np.testing.assert_array_equal(usage.difference, 0.0)
    np.testing.assert_allclose(usage.p_value, 1.0)


def test_usage_concentrated_group():
    nd = [0, 1, 2, 3, 3, 4]
    usage = usage_stats({0: nd, 1: [3, 3, 3]}, k=5)
    assert usage.difference[3] == pytest.approx(1 - 2 / 6)


def test_usage_matches_naive_recount():
    rng = np.random.default_rng(0)
    groups = {0: [rng.integers(0, 7, size=rng.integers(5, 40)).tolist() for _ in range(6)],
              1: [rng.integers(0, 7, size=rng.integers(5, 40)).tolist() for _ in range(6)]}
    usage = usage_stats(groups, k=7)
    for g in (0, 1):
        flat = [t for seg in groups[g] for t in seg]
        tally = [sum(1 for t in flat if t == j) for j in range(7)]
        assert usage.counts[g].tolist() == tally
        assert usage.frequencies[g].sum() == pytest.approx(1.0, abs=1e-9)
        assert usage.frequencies[g].tolist() == pytest.approx([n / len(flat) for n in tally], abs=1e-15)


def test_usage_missing_group_and_unused_centroid():
    with pytest.raises(ValueError, match="group D"):
        usage_stats({"ND": [0, 1]})
    with pytest.raises(ValueError, match="group ND"):
        usage_stats({"ND": [], "D": [1]})
    usage = usage_stats({0: [0, 1], 1: [1, 0]}, k=3)
    assert np.isnan(usage.chi2[2])
    rows = significance_report(usage)
    assert rows[2]["flag"] is False and rows[2]["p"] is None


def _usage_with_p(ps):
    usage = usage_stats({0: [0, 1], 1: [1, 0]}, k=len(ps))
    usage.p_value = np.array(ps, dtype=float)
    usage.chi2 = np.ones(len(ps))
    return usage


def test_report_threshold_is_strict():
    rows = significance_report(_usage_with_p([0.049, 0.051, 0.05]))
    assert [r["flag"] for r in rows] == [True, False, False]
    assert not any(r["flag"] for r in significance_report(_usage_with_p([0.2, 0.06])))


def test_report_bonferroni():
    rows = significance_report(_usage_with_p([0.004, 0.006, 0.2, 0.3, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95]), bonferroni=True)
    assert [r["flag"] for r in rows][:2] == [True, False]


def test_report_csv_shape(tmp_path):
    rng = np.random.default_rng(1)
    usage = usage_stats({0: rng.integers(0, 10, 500), 1: rng.integers(0, 10, 500)}, k=10)
    rows = significance_report(usage, path=tmp_path / "r.csv")
    with (tmp_path / "r.csv").open() as fh:
        table = list(csv.reader(fh))
    assert table[0] == ["id", "diff", "chi2", "p", "flag"]
    assert len(table) == 11 and len(rows) == 10
    assert [int(r[0]) for r in table[1:]] == list(range(10))


def test_sampling_config():
    items = list(range(50))
    cfg = AnalysisConfig(sample_size=10, seed=3)
    a = sample_recordings(items, cfg)
    assert len(a) == 10 and a == sorted(a) and a == sample_recordings(items, cfg)
    assert sample_recordings(items, AnalysisConfig(sample_size=None)) == items
    with pytest.raises(ValueError):
        AnalysisConfig(alpha=0.0)


def test_null_false_positive_rate_is_calibrated():
    rate = null_false_positive_rate(trials=500, seed=0)
    assert 0.03 <= rate <= 0.07
