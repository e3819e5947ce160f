import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from p4pdid.did import build_design, fit_multivariate_mixed
from p4pdid.exceptions import ConfigError, RankError, SchemeMismatchError
from p4pdid.inference import (cluster_bootstrap, coefficient_table, rao_f, resample_indices,
                              stars, wilks_parallel_trend_test)
from p4pdid.riskadjust import PanelDataset
from p4pdid.sim import generate_panel

from conftest import panel_generator

OUTS = ("mortality", "readmissions", "transfers")


@pytest.fixture(scope="module")
def design(small_panel):
    return build_design(small_panel, "base", outcomes=OUTS)


@pytest.fixture(scope="module")
def boot(design):
    return cluster_bootstrap(design, "base", B=100, seed=42)


def test_stars():
    assert [stars(p) for p in (0.001, 0.02, 0.07, 0.2, np.nan)] == ["***", "**", "*", "", ""]


def test_resample_indices_seeded():
    a = resample_indices(10, 5, 3)
    assert a.shape == (5, 10) and a.min() >= 0 and a.max() < 10
    assert np.array_equal(a, resample_indices(10, 5, 3))
    assert not np.array_equal(a, resample_indices(10, 5, 4))


def test_too_few_replicates(design):
    with pytest.raises(ConfigError):
        cluster_bootstrap(design, "base", B=50)


def test_bootstrap_table(boot, design):
    t = boot.table
    assert len(t) == len(design.columns) * len(OUTS)
    assert boot.valid and boot.n_failed == 0
    assert (t["se"] > 0).all()
    assert ((t["p"] >= 0) & (t["p"] <= 1)).all()
    assert (t["ci_low"] <= t["ci_high"]).all()
    r = boot.row("TREATED:YEAR_2013", "readmissions")
    assert r["ci_low"] < r["estimate"] < r["ci_high"]
    # a strong effect relative to its se is significant
    assert r["p"] < 0.01


def test_bootstrap_se_close_to_model_se(boot, design):
    fit = fit_multivariate_mixed(design)
    model = fit.se()
    b = boot.table.set_index(["term", "outcome"])["se"]
    ratio = np.array([b[("TREATED:YEAR_2012", o)] / model.loc["TREATED:YEAR_2012", o]
                      for o in OUTS])
    assert np.all((ratio > 0.6) & (ratio < 1.6))


def test_bootstrap_independent_of_workers(design, boot):
    par = cluster_bootstrap(design, "base", B=100, seed=42, workers=2)
    np.testing.assert_array_equal(par.replicates, boot.replicates)
    pd.testing.assert_frame_equal(par.table, boot.table)


def test_bootstrap_csv(tmp_path, boot):
    boot.to_csv(tmp_path / "b.csv")
    back = pd.read_csv(tmp_path / "b.csv")
    assert list(back.columns) == ["term", "outcome", "estimate", "se", "p", "ci_low", "ci_high"]


def test_coefficient_table_stars(boot, design):
    fit = fit_multivariate_mixed(design)
    tab = coefficient_table(fit, boot).set_index("term")
    assert tab.loc["TREATED:YEAR_2013", "readmissions"].endswith("***")
    plain = coefficient_table(fit).set_index("term")
    assert "*" not in "".join(plain["readmissions"])


def test_rao_f_boundaries():
    F, df1, df2, p = rao_f(1.0, 3, 1, 100)
    assert F == 0 and p == 1.0
    F, _, _, p = rao_f(1e-6, 3, 1, 100)
    assert p < 1e-10


def test_wilks_single_outcome_is_squared_t(small_panel):
    """With one outcome the Rao F is exact and equals the squared OLS t statistic."""
    d = build_design(small_panel, "base", outcomes=("mortality",))
    res = wilks_parallel_trend_test(d)
    y = d.Y[:, 0]
    dummies = (d.groups[:, None] == np.arange(d.n_hospitals)).astype(float)
    X = np.hstack([dummies, d.X[:, 1:]])  # the intercept is absorbed by the hospital dummies
    keep = np.linalg.matrix_rank(X)
    beta, rss, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    dfe = len(y) - rank
    s2 = resid @ resid / dfe
    j = d.n_hospitals + d.columns.index("TREATED:YEAR_2011") - 1
    cov = s2 * np.linalg.pinv(X.T @ X)
    t = beta[j] / np.sqrt(cov[j, j])
    assert res.stat == pytest.approx(t * t, rel=1e-8)
    assert res.df2 == dfe and keep == rank
    assert res.term == "TREATED:YEAR_2011"


def test_wilks_affine_invariance(small_panel):
    base = wilks_parallel_trend_test(small_panel)
    f = small_panel.frame
    f["ho_transfers"] = 3.0 + 7.5 * f["ho_transfers"]
    moved = wilks_parallel_trend_test(PanelDataset(f, validate=False))
    assert abs(moved.lam - base.lam) < 1e-8
    assert 0 < base.lam <= 1 and 0 <= base.p <= 1
    assert json.loads(json.dumps(base.to_dict())).keys() == {"lambda", "stat", "df1", "df2", "p"}


def test_wilks_detects_pretrend():
    null = wilks_parallel_trend_test(generate_panel(panel_generator(n_hospitals=40, seed=8)))
    alt = wilks_parallel_trend_test(generate_panel(panel_generator(n_hospitals=40, seed=8,
                                                                   did_2011=0.01)))
    assert alt.p < 1e-6 < null.p


def test_wilks_errors(small_panel):
    with pytest.raises(SchemeMismatchError):
        wilks_parallel_trend_test(small_panel, "surgical")
    f = small_panel.frame
    f["ho_voldisch"] = f["ho_transfers"]
    with pytest.raises(RankError):
        wilks_parallel_trend_test(PanelDataset(f))


@settings(max_examples=25, deadline=None)
@given(st.floats(1e-9, 1.0), st.integers(1, 6), st.floats(10, 1e4))
def test_rao_f_ranges(lam, p, nu):
    F, df1, df2, pv = rao_f(lam, p, 1, nu)
    assert F >= 0 and 0 <= pv <= 1 and df1 == p
