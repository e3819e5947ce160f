import json
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from scipy.special import expit

from p4pdid.exceptions import ConfigError
from p4pdid.sim import (GeneratorTruth, PatientOutcomeTruth, calibrate_patient_did,
                        four_means_did, generate_panel, generate_synthetic, panel_truth,
                        recovery_study, true_did_coefficients)

from conftest import panel_generator, patient_truth


def test_truth_json_roundtrip(tmp_path):
    t = panel_generator()
    p = tmp_path / "t.json"
    p.write_text(json.dumps(t.to_dict()))
    assert GeneratorTruth.from_json(p).to_dict() == t.to_dict()


@pytest.mark.parametrize("kw", [
    {"n_hospitals": 0}, {"treated_fraction": 1.5}, {"ownership_mix": (0.5, 0.5, 0.5)},
    {"Sigma": [[1.0, 2.0], [2.0, 1.0]]},
])
def test_truth_validation(kw):
    with pytest.raises(ConfigError):
        replace(panel_generator(), **kw) if "Sigma" not in kw else \
            GeneratorTruth(panel={"mortality": {"intercept": 0.1}, "transfers": {"intercept": 0.1}},
                           **kw)


def test_truth_json_errors(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        GeneratorTruth.from_json(p)
    p.write_text(json.dumps({"n_hospitals": 3, "flavour": 1}))
    with pytest.raises(ConfigError, match="flavour"):
        GeneratorTruth.from_json(p)


def test_synthetic_structure(small_admissions, small_truth):
    f = small_admissions.frame
    wards = f.drop_duplicates(["hospital_id", "ward_id"])
    n_w = small_truth.n_hospitals * small_truth.wards_per_hospital
    assert len(wards) == n_w
    assert wards["treated"].sum() == round(0.71 * n_w)
    assert f.loc[f["surgical"] == 0, "return_or"].isna().all()
    assert f.loc[f["surgical"] == 1, "return_or"].notna().all()
    again = generate_synthetic(small_truth)
    pd.testing.assert_frame_equal(again.frame, f)
    other = generate_synthetic(small_truth, seed=123)
    assert len(other) != len(f) or not other.frame.equals(f)


def test_panel_generator_cells(small_panel):
    t = panel_generator()
    assert len(small_panel) == t.n_hospitals * t.wards_per_hospital * 48
    f = small_panel.frame
    assert f.loc[f["surgical"] == 0, "ho_return"].isna().all()


def test_panel_truth_closed_form():
    t = GeneratorTruth(patient={"mortality": PatientOutcomeTruth(
        alpha=-2.0, did=(0.0, 0.3, -0.4), treated=0.2)}, n_hospitals=4)
    got = panel_truth(t, "mortality", n_probe=1000)
    base = expit(-1.8) - expit(-2.0)
    expect = [0.0, expit(-1.5) - expit(-2.0) - base, expit(-2.2) - expit(-2.0) - base]
    np.testing.assert_allclose(got, expect, atol=1e-12)


def test_calibration_hits_target():
    t = patient_truth()
    cal = calibrate_patient_did(t, "readmissions", (0.0, -0.005, -0.011), n_probe=50_000)
    np.testing.assert_allclose(panel_truth(cal, "readmissions", n_probe=50_000),
                               [0.0, -0.005, -0.011], atol=1e-9)


def test_four_means_did():
    rows = []
    for tr, y, v in [(0, 2010, 1.0), (0, 2013, 2.0), (1, 2010, 5.0), (1, 2013, 4.5)]:
        rows.append({"treated": tr, "year": y, "ho_mortality": v})

    class P:
        _frame = pd.DataFrame(rows)
    assert four_means_did(P, "mortality", 2010, 2013) == -1.5


def test_true_coefficients_panel_mode():
    t = panel_generator()
    tab = true_did_coefficients(t, "panel", "surgical")
    assert set(tab["outcome"]) == {"mortality", "readmissions", "transfers", "voldisch"}
    assert tab.set_index(["term", "outcome"]).loc[
        ("SURGICAL:TREATED:YEAR_2013", "voldisch"), "truth"] == 0.003
    with pytest.raises(ConfigError):
        true_did_coefficients(t, "nonsense")


def test_recovery_study_small():
    t = panel_generator(n_hospitals=12, seed=4)
    rep = recovery_study(t, 50, mode="panel")
    tab = rep.table
    assert rep.n_failed == 0 and rep.interval == "model-wald"
    assert tab[["mean_estimate", "bias", "empirical_se", "mc_se", "coverage"]].notna().all().all()
    assert ((tab["coverage"] >= 0) & (tab["coverage"] <= 1)).all()
    assert np.all(np.abs(tab["bias"]) < 4 * tab["mc_se"] + 1e-12)
    again = recovery_study(t, 50, mode="panel")
    np.testing.assert_array_equal(again.estimates, rep.estimates)
    with pytest.raises(ConfigError):
        recovery_study(t, 10, mode="panel")
