import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from p4pdid.did import build_design, fit_multivariate_mixed
from p4pdid.effects import MarginalEffectsTable, did_reduction, marginal_effects, savings_count
from p4pdid.exceptions import ValidationError


@pytest.fixture(scope="module")
def fitted(small_panel):
    d = build_design(small_panel, "surgical")
    return fit_multivariate_mixed(d), d


def test_margins_gap_equals_coefficients(fitted):
    fit, d = fitted
    me = marginal_effects(fit, d)
    diff = me.differences().set_index(["outcome", "level", "year"])["diff_pct"]
    for o in fit.outcomes:
        b = fit.coef[o]
        assert diff[(o, "medical", 2010)] == pytest.approx(100 * b["TREATED"], abs=1e-10)
        assert diff[(o, "medical", 2012)] == pytest.approx(
            100 * (b["TREATED"] + b["TREATED:YEAR_2012"]), abs=1e-10)
        assert diff[(o, "surgical", 2013)] == pytest.approx(
            100 * (b["TREATED"] + b["TREATED:YEAR_2013"] + b["SURGICAL:TREATED"]
                   + b["SURGICAL:TREATED:YEAR_2013"]), abs=1e-10)


def test_margins_table_shape(fitted, tmp_path):
    fit, d = fitted
    me = marginal_effects(fit, d)
    assert len(me.table) == 4 * 4 * 2 * 2  # outcomes x years x groups x levels
    me.to_csv(tmp_path / "m.csv")
    assert list(pd.read_csv(tmp_path / "m.csv").columns) == [
        "outcome", "year", "group", "level", "predicted_pct"]


def test_did_summary_consistent_with_coefficients(fitted):
    fit, d = fitted
    summ = did_reduction(marginal_effects(fit, d), baseline_year=2011)
    b = fit.coef["readmissions"]
    red = summ.reduction("readmissions", 2012, "medical")
    assert red == pytest.approx(100 * (b["TREATED:YEAR_2011"] - b["TREATED:YEAR_2012"]), abs=1e-10)
    inc = summ.reduction("readmissions", 2013, "medical")
    assert inc == pytest.approx(100 * (b["TREATED:YEAR_2012"] - b["TREATED:YEAR_2013"]), abs=1e-10)


def test_reduction_from_displayed_gaps():
    t = MarginalEffectsTable.from_differences({"readmissions": {2011: 0.31, 2012: 0.91, 2013: 1.52},
                                               "transfers": {2011: 0.72, 2012: 0.19, 2013: 0.18}})
    s = did_reduction(t, baseline_year=2011)
    assert s.reduction("transfers", 2012) == pytest.approx(0.53, abs=1e-12)
    assert s.reduction("transfers", 2013) == pytest.approx(0.01, abs=1e-12)
    # the gap widened for readmissions: same magnitudes, negative sign
    assert s.reduction("readmissions", 2012) == pytest.approx(-0.60, abs=1e-12)
    assert s.reduction("readmissions", 2013) == pytest.approx(-0.61, abs=1e-12)


def test_missing_baseline():
    t = MarginalEffectsTable.from_differences({"mortality": {2012: 0.1, 2013: 0.2}})
    with pytest.raises(ValidationError, match="2011"):
        did_reduction(t, baseline_year=2011)


def test_savings_rounding_and_direction():
    t = MarginalEffectsTable.from_differences({"transfers": {2011: 0.72, 2012: 0.19, 2013: 0.18},
                                               "mortality": {2011: 0.10, 2012: 0.35, 2013: 0.35}})
    s = did_reduction(t, baseline_year=2011)
    out = savings_count(s, {2012: 10000, 2013: 50}).set_index(["outcome", "year"])
    assert out.loc[("transfers", 2012), "savings"] == 53
    assert out.loc[("transfers", 2012), "direction"] == "saved"
    assert out.loc[("mortality", 2012), "savings"] == 25
    assert out.loc[("mortality", 2012), "direction"] == "excess"
    assert out.loc[("mortality", 2013), "savings"] == 0
    assert out.loc[("mortality", 2013), "direction"] == "none"
    with pytest.raises(ValidationError):
        savings_count(s, {2012: 0})


def test_savings_half_rounds_up():
    t = MarginalEffectsTable.from_differences({"transfers": {2011: 0.5, 2012: 0.0}})
    out = savings_count(did_reduction(t, 2011), {2012: 100})
    assert out["savings"].iloc[0] == 1


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.floats(-3, 3))
def test_reductions_telescope_and_shift_invariant(gaps, shift):
    """Reductions add up to gap(baseline) - gap(last year); a common shift cancels."""
    years = (2011, 2012, 2013)
    t = MarginalEffectsTable.from_differences({"x": dict(zip(years, gaps))})
    s = did_reduction(t, 2011)
    total = s.reduction("x", 2012) + s.reduction("x", 2013)
    assert total == pytest.approx(gaps[0] - gaps[2], abs=1e-9)
    t2 = MarginalEffectsTable.from_differences({"x": dict(zip(years, gaps))}, control_pct=shift)
    s2 = did_reduction(t2, 2011)
    assert s2.reduction("x", 2012) == pytest.approx(s.reduction("x", 2012), abs=1e-9)
