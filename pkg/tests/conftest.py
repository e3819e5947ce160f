import numpy as np
import pytest

from p4pdid.sim import GeneratorTruth, PanelOutcomeTruth, PatientOutcomeTruth


def patient_truth(n_hospitals=12, per_cell=4.0, seed=7, **kw) -> GeneratorTruth:
    """Small patient-level generator with structure in two outcomes."""
    return GeneratorTruth(
        patient={
            "readmissions": PatientOutcomeTruth(alpha=-2.6, eta=(0.1, 0.01, 0.3, 0.2, 0.2),
                                                sigma_mu_sq=0.4, sigma_nu_sq=0.2,
                                                did=(0.0, -0.1, -0.2)),
            "mortality": PatientOutcomeTruth(alpha=-3.5, eta=(0.2, 0.02, 0.5, 0.1, 0.3),
                                             sigma_mu_sq=0.2, sigma_nu_sq=0.1),
        },
        n_hospitals=n_hospitals, patients_per_ward_month=per_cell, seed=seed, **kw)


def panel_generator(n_hospitals=30, seed=11, did_2011=0.0, sigma_alpha_sq=4e-6,
                    corr=0.3, **kw) -> GeneratorTruth:
    """Second-stage generator with all five outcomes and correlated errors."""
    means = {"mortality": 0.04, "readmissions": 0.06, "return_or": 0.05,
             "transfers": 0.04, "voldisch": 0.05}
    panel = {}
    for o, m in means.items():
        panel[o] = PanelOutcomeTruth(
            intercept=m, treated=0.002, year=(0.001, -0.001, 0.002),
            did=(did_2011, -0.005, -0.011), month=-2e-5, sigma_alpha_sq=sigma_alpha_sq,
            surgical=0.004, surgical_did=(0.0, 0.002, 0.003),
            own_main={"PROFIT": 0.003}, own_did={"PROFIT": (0.0, 0.001, 0.002)})
    sd = np.array([0.01, 0.012, 0.008, 0.01, 0.009])
    R = np.full((5, 5), corr) + (1 - corr) * np.eye(5)
    Sigma = (np.outer(sd, sd) * R).tolist()
    return GeneratorTruth(panel=panel, Sigma=Sigma, n_hospitals=n_hospitals, seed=seed, **kw)


@pytest.fixture(scope="session")
def small_truth():
    return patient_truth()


@pytest.fixture(scope="session")
def small_admissions(small_truth):
    from p4pdid.sim import generate_synthetic
    return generate_synthetic(small_truth)


@pytest.fixture(scope="session")
def small_panel():
    from p4pdid.sim import generate_panel
    return generate_panel(panel_generator())


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
