"""
Synthetic data with known ground truth.

Two generators are provided. :func:`generate_synthetic` draws patient
records from the nested logistic model, with DID effects injected on the
logit scale; the implied ward-month DID on the probability scale is
obtained numerically by :func:`panel_truth`. :func:`generate_panel` draws a
ward-month panel straight from the multivariate mixed model, so the second
stage is correctly specified and the truth is the parameter itself.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import optimize, stats
from scipy.special import expit

from .core import OUTCOMES, AdmissionDataset, Ownership, StudyConfig
from .exceptions import ConfigError, P4PError
from .riskadjust import PANEL_OUTCOME_COLUMNS, PanelDataset

logger = logging.getLogger(__name__)

GENDER_P = 0.46
AGE_MEAN, AGE_SD, AGE_MIN = 59.5, 21.0, 2.0
INTCARE_RATE = 0.053
DRG_LOG_MEAN, DRG_LOG_VAR = -0.110, 0.585
COMORBIDITY_RATE = 0.3
WARD_ATTRIBUTE_P = {"technology": 0.3, "teaching": 0.2, "specialised": 0.2}
PROBE_DRAWS = 1_000_000


@dataclass
class PatientOutcomeTruth:
    """
    Logit-scale generating model of one binary outcome.

    ``year`` and ``did`` list one effect per non-reference year; ``month``
    is a slope on the running month index.
    """

    alpha: float
    eta: tuple = (0.0, 0.0, 0.0, 0.0, 0.0)
    sigma_mu_sq: float = 0.0
    sigma_nu_sq: float = 0.0
    treated: float = 0.0
    year: tuple = (0.0, 0.0, 0.0)
    did: tuple = (0.0, 0.0, 0.0)
    month: float = 0.0
    surgical: float = 0.0


@dataclass
class PanelOutcomeTruth:
    """
    Ward-month model of one risk-adjusted outcome, on the probability scale.

    The ``surgical_*`` and ``own_*`` entries are the extended-scheme
    effects; ``own_*`` are keyed by ``NOPROFIT`` and ``PROFIT``.
    """

    intercept: float
    treated: float = 0.0
    year: tuple = (0.0, 0.0, 0.0)
    did: tuple = (0.0, 0.0, 0.0)
    month: float = 0.0
    sigma_alpha_sq: float = 0.0
    surgical: float = 0.0
    surgical_year: tuple = (0.0, 0.0, 0.0)
    surgical_treated: float = 0.0
    surgical_did: tuple = (0.0, 0.0, 0.0)
    own_main: dict = field(default_factory=dict)
    own_year: dict = field(default_factory=dict)
    own_treated: dict = field(default_factory=dict)
    own_did: dict = field(default_factory=dict)


@dataclass
class GeneratorTruth:
    """
    Every generating parameter plus the study structure.

    ``Sigma`` is the cross-outcome error covariance of the panel model,
    in the order of ``panel``'s keys. ``ownership_mix`` holds the hospital
    shares of PUBLIC, PROFIT and NOPROFIT, in that order.
    """

    patient: Dict[str, PatientOutcomeTruth] = field(default_factory=dict)
    panel: Dict[str, PanelOutcomeTruth] = field(default_factory=dict)
    Sigma: Optional[list] = None
    n_hospitals: int = 150
    wards_per_hospital: int = 3
    patients_per_ward_month: float = 15.0
    treated_fraction: float = 0.71
    surgical_fraction: float = 0.5
    ownership_mix: tuple = (0.6, 0.25, 0.15)
    years: tuple = (2010, 2011, 2012, 2013)
    seed: int = 0

    def __post_init__(self):
        self.patient = {k: v if isinstance(v, PatientOutcomeTruth) else PatientOutcomeTruth(**v)
                        for k, v in self.patient.items()}
        self.panel = {k: v if isinstance(v, PanelOutcomeTruth) else PanelOutcomeTruth(**v)
                      for k, v in self.panel.items()}
        self.years = tuple(int(y) for y in self.years)
        self.ownership_mix = tuple(float(x) for x in self.ownership_mix)
        self.validate()

    @property
    def n_post(self) -> int:
        return len(self.years) - 1

    def validate(self) -> None:
        if self.n_hospitals < 1:
            raise ConfigError("n_hospitals must be >= 1")
        if self.wards_per_hospital < 1:
            raise ConfigError("wards_per_hospital must be >= 1")
        if not self.patients_per_ward_month > 0:
            raise ConfigError("patients_per_ward_month must be positive")
        for name in ("treated_fraction", "surgical_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        mix = np.asarray(self.ownership_mix)
        if mix.shape != (3,) or np.any(mix < 0) or not math.isclose(mix.sum(), 1.0, abs_tol=1e-9):
            raise ConfigError("ownership_mix must be three non-negative shares summing to 1")
        if len(self.years) < 2:
            raise ConfigError("at least two years are required")
        ny = self.n_post
        for name, t in self.patient.items():
            if name not in OUTCOMES:
                raise ConfigError(f"unknown outcome {name!r}")
            if len(t.eta) != 5 or len(t.year) != ny or len(t.did) != ny:
                raise ConfigError(f"{name}: eta needs 5 entries, year/did {ny}")
            if t.sigma_mu_sq < 0 or t.sigma_nu_sq < 0:
                raise ConfigError(f"{name}: variances must be non-negative")
            vals = [t.alpha, t.sigma_mu_sq, t.sigma_nu_sq, t.treated, t.month, t.surgical,
                    *t.eta, *t.year, *t.did]
            if not np.all(np.isfinite(vals)):
                raise ConfigError(f"{name}: parameters must be finite")
        for name, t in self.panel.items():
            if name not in OUTCOMES:
                raise ConfigError(f"unknown outcome {name!r}")
            for attr in ("year", "did", "surgical_year", "surgical_did"):
                if len(getattr(t, attr)) != ny:
                    raise ConfigError(f"{name}: {attr} needs {ny} entries")
            if t.sigma_alpha_sq < 0:
                raise ConfigError(f"{name}: sigma_alpha_sq must be non-negative")
        if self.panel:
            S = self.sigma_matrix()
            if S.shape != (len(self.panel),) * 2:
                raise ConfigError("Sigma must be square with one row per panel outcome")
            if not np.allclose(S, S.T) or np.min(np.linalg.eigvalsh(S)) <= 0:
                raise ConfigError("Sigma must be symmetric positive definite")

    def sigma_matrix(self) -> np.ndarray:
        if self.Sigma is None:
            return np.eye(len(self.panel)) * 1e-4
        return np.asarray(self.Sigma, dtype=float)

    def to_dict(self) -> dict:
        """JSON-native form (tuples become lists)."""
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorTruth":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown truth keys {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"invalid truth document: {exc}") from exc

    @classmethod
    def from_json(cls, path) -> "GeneratorTruth":
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid truth JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("truth JSON must be an object")
        return cls.from_dict(d)

    def study_config(self, **kw) -> StudyConfig:
        ys = self.years
        half = max(1, len(ys) // 2)
        return StudyConfig(pre_years=ys[:half], post_years=ys[half:], reference_year=ys[0], **kw)


# --------------------------------------------------------------------------------------
# structure


def _largest_remainder(shares, total):
    raw = np.asarray(shares) * total
    counts = np.floor(raw).astype(int)
    rest = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rest]] += 1
    return counts


@dataclass
class _Structure:
    hospital: np.ndarray      # per ward: hospital index
    ward: np.ndarray          # per ward: ward index within hospital
    treated: np.ndarray
    surgical: np.ndarray
    ownership: np.ndarray     # per ward, codes
    attrs: dict               # per ward binary attributes
    hospital_labels: list
    ward_labels: list


def _structure(truth: GeneratorTruth, rng: np.random.Generator) -> _Structure:
    H, W = truth.n_hospitals, truth.wards_per_hospital
    n = H * W
    hospital = np.repeat(np.arange(H), W)
    ward = np.tile(np.arange(W), H)
    treated = np.zeros(n, dtype=np.int64)
    treated[rng.permutation(n)[:int(round(truth.treated_fraction * n))]] = 1
    surgical = np.zeros(n, dtype=np.int64)
    surgical[rng.permutation(n)[:int(round(truth.surgical_fraction * n))]] = 1
    own_counts = _largest_remainder(truth.ownership_mix, H)
    codes = np.repeat(np.array([o.value for o in Ownership]), own_counts)
    own_h = codes[rng.permutation(H)]
    attrs = {k: (rng.random(n) < p).astype(np.int64) for k, p in WARD_ATTRIBUTE_P.items()}
    width = len(str(H))
    hl = [f"H{h + 1:0{width}d}" for h in range(H)]
    wl = [f"W{w + 1:02d}" for w in range(W)]
    return _Structure(hospital, ward, treated, surgical, own_h[hospital], attrs, hl, wl)


def draw_covariates(rng: np.random.Generator, n: int) -> dict:
    """Patient covariates matching the calibration marginals."""
    a = (AGE_MIN - AGE_MEAN) / AGE_SD
    age = stats.truncnorm.rvs(a, np.inf, loc=AGE_MEAN, scale=AGE_SD, size=n, random_state=rng)
    return {
        "gender": (rng.random(n) < GENDER_P).astype(np.int64),
        "age": np.round(age, 1),
        "intcare": rng.poisson(INTCARE_RATE, n).astype(np.int64),
        "drg_weight": np.round(rng.lognormal(DRG_LOG_MEAN, np.sqrt(DRG_LOG_VAR), n), 4),
        "comorbidity": rng.poisson(COMORBIDITY_RATE, n).astype(np.int64),
    }


def _patient_logit(t: PatientOutcomeTruth, cov, treated, year_pos, month_index, surgical,
                   mu, nu):
    eta = np.asarray(t.eta, dtype=float)
    lin = t.alpha + sum(eta[i] * cov[c].astype(float)
                        for i, c in enumerate(("gender", "age", "intcare", "drg_weight",
                                               "comorbidity")))
    yr = np.r_[0.0, np.asarray(t.year, float)]
    dd = np.r_[0.0, np.asarray(t.did, float)]
    return (lin + t.treated * treated + yr[year_pos] + dd[year_pos] * treated
            + t.month * month_index + t.surgical * surgical + mu + nu)


def generate_synthetic(truth: GeneratorTruth, seed: Optional[int] = None) -> AdmissionDataset:
    """
    Patient records drawn from the nested logistic model.

    Patients per ward-month are Poisson; ward-year and hospital-year
    intercepts are drawn independently per outcome. Outcomes without a
    patient model are drawn as Bernoulli(0.05) with no structure so the
    schema stays complete.
    """
    truth.validate()
    rng = np.random.default_rng(truth.seed if seed is None else seed)
    st = _structure(truth, rng)
    years = np.asarray(truth.years)
    Y, M = len(years), 12
    n_w = len(st.hospital)
    counts = rng.poisson(truth.patients_per_ward_month, size=(n_w, Y, M))
    total = int(counts.sum())
    if total == 0:
        raise ConfigError("generator produced no patients")
    flat = counts.ravel()
    cell = np.repeat(np.arange(flat.size), flat)
    w_idx, y_pos, m_idx = np.unravel_index(cell, (n_w, Y, M))
    month = m_idx + 1
    month_index = 12 * y_pos + month
    h_idx = st.hospital[w_idx]
    treated = st.treated[w_idx]
    surgical = st.surgical[w_idx]
    cov = draw_covariates(rng, total)

    data = {
        "hospital_id": np.asarray(st.hospital_labels, dtype=object)[h_idx],
        "ward_id": np.asarray(st.ward_labels, dtype=object)[st.ward[w_idx]],
        "year": years[y_pos].astype(np.int64),
        "month": month.astype(np.int64),
        **cov,
        **{k: v[w_idx] for k, v in st.attrs.items()},
        "surgical": surgical,
        "ownership": st.ownership[w_idx],
        "treated": treated,
    }
    for outcome in OUTCOMES:
        t = truth.patient.get(outcome)
        if t is None:
            p = np.full(total, 0.05)
        else:
            mu_wy = rng.normal(0.0, np.sqrt(t.sigma_mu_sq), size=(n_w, Y))
            nu_hy = rng.normal(0.0, np.sqrt(t.sigma_nu_sq), size=(truth.n_hospitals, Y))
            p = expit(_patient_logit(t, cov, treated, y_pos, month_index, surgical,
                                     mu_wy[w_idx, y_pos], nu_hy[h_idx, y_pos]))
        y = (rng.random(total) < p).astype(np.float64)
        if outcome == "return_or":
            y = np.where(surgical == 1, y, np.nan)
            data[outcome] = y
        else:
            data[outcome] = y.astype(np.int64)
    frame = pd.DataFrame(data)
    return AdmissionDataset(frame, truth.study_config())


def panel_truth(truth: GeneratorTruth, outcome: str, n_probe: int = PROBE_DRAWS,
                seed: int = 12345) -> np.ndarray:
    """
    Probability-scale DID per non-reference year implied by a patient model.

    Large-sample evaluation with common random numbers: one probe sample of
    covariates and random effects is pushed through every group-year
    combination and averaged over the months of each year. The mix of
    surgical wards follows the generator.
    """
    t = truth.patient[outcome]
    rng = np.random.default_rng(seed)
    cov = draw_covariates(rng, n_probe)
    mu = rng.normal(0.0, np.sqrt(t.sigma_mu_sq), n_probe)
    nu = rng.normal(0.0, np.sqrt(t.sigma_nu_sq), n_probe)
    month = rng.integers(1, 13, n_probe)
    if outcome == "return_or":
        surgical = np.ones(n_probe)
    else:
        surgical = (rng.random(n_probe) < truth.surgical_fraction).astype(float)
    gaps = []
    for y_pos in range(len(truth.years)):
        mi = 12 * y_pos + month
        means = []
        for tr in (0.0, 1.0):
            p = expit(_patient_logit(t, cov, tr, np.full(n_probe, y_pos), mi, surgical, mu, nu))
            means.append(p.mean())
        gaps.append(means[1] - means[0])
    gaps = np.asarray(gaps)
    return gaps[1:] - gaps[0]


def calibrate_patient_did(truth: GeneratorTruth, outcome: str, targets: Sequence[float],
                          n_probe: int = 200_000, seed: int = 12345) -> GeneratorTruth:
    """
    Solve for logit-scale DID shifts whose probability-scale DID equals ``targets``.

    Returns a new truth; the other parameters are untouched.
    """
    t = truth.patient[outcome]
    did = list(t.did)
    for j, target in enumerate(targets):
        def gap(x, j=j):
            d = list(did)
            d[j] = x
            tr = replace(truth, patient={**truth.patient, outcome: replace(t, did=tuple(d))})
            return panel_truth(tr, outcome, n_probe, seed)[j] - target
        did[j] = optimize.brentq(gap, -3.0, 3.0, xtol=1e-10)
    return replace(truth, patient={**truth.patient, outcome: replace(t, did=tuple(did))})


def generate_panel(truth: GeneratorTruth, seed: Optional[int] = None) -> PanelDataset:
    """
    Ward-month panel drawn directly from the multivariate mixed model.

    Every ward-month cell exists. Values outside [0, 1] are clipped and
    counted in the log; keep variances small relative to the means so this
    does not happen.
    """
    truth.validate()
    if not truth.panel:
        raise ConfigError("truth has no panel model")
    rng = np.random.default_rng(truth.seed if seed is None else seed)
    st = _structure(truth, rng)
    years = np.asarray(truth.years)
    Y, M = len(years), 12
    n_w = len(st.hospital)
    w_idx, y_pos, m_idx = np.unravel_index(np.arange(n_w * Y * M), (n_w, Y, M))
    month = m_idx + 1
    month_index = 12 * y_pos + month
    h_idx = st.hospital[w_idx]
    treated = st.treated[w_idx].astype(float)
    surgical = st.surgical[w_idx].astype(float)
    own = st.ownership[w_idx]
    n_patients = np.maximum(rng.poisson(truth.patients_per_ward_month, w_idx.size), 1)

    outs = list(truth.panel)
    S = truth.sigma_matrix()
    eps = rng.multivariate_normal(np.zeros(len(outs)), S, size=w_idx.size, method="cholesky")
    alpha = np.column_stack([rng.normal(0.0, np.sqrt(truth.panel[o].sigma_alpha_sq),
                                        truth.n_hospitals) for o in outs])
    data = {
        "hospital_id": np.asarray(st.hospital_labels, dtype=object)[h_idx],
        "ward_id": np.asarray(st.ward_labels, dtype=object)[st.ward[w_idx]],
        "year": years[y_pos].astype(np.int64),
        "month": month.astype(np.int64),
        "month_index": month_index.astype(np.int64),
        "treated": treated.astype(np.int64),
        "surgical": surgical.astype(np.int64),
        "ownership": own,
        "n_patients": n_patients.astype(np.int64),
    }
    n_clipped = 0
    for o in OUTCOMES:
        col = PANEL_OUTCOME_COLUMNS[o]
        if o not in truth.panel:
            data[col] = np.full(w_idx.size, np.nan)
            continue
        k = outs.index(o)
        t = truth.panel[o]
        v = _panel_mean(t, treated, y_pos, month_index, surgical, own) + alpha[h_idx, k] + eps[:, k]
        n_clipped += int(np.sum((v < 0) | (v > 1)))
        v = np.clip(v, 0.0, 1.0)
        if o == "return_or":
            v = np.where(surgical == 1, v, np.nan)
        data[col] = v
    if n_clipped:
        logger.warning("generate_panel clipped %d values into [0, 1]", n_clipped)
    return PanelDataset(pd.DataFrame(data), int(years[0]))


def _panel_mean(t: PanelOutcomeTruth, treated, y_pos, month_index, surgical, own):
    yr = np.r_[0.0, np.asarray(t.year, float)]
    dd = np.r_[0.0, np.asarray(t.did, float)]
    v = t.intercept + t.treated * treated + yr[y_pos] + dd[y_pos] * treated + t.month * month_index
    syr = np.r_[0.0, np.asarray(t.surgical_year, float)]
    sdd = np.r_[0.0, np.asarray(t.surgical_did, float)]
    v = v + surgical * (t.surgical + syr[y_pos] + t.surgical_treated * treated + sdd[y_pos] * treated)
    for level in ("NOPROFIT", "PROFIT"):
        ind = (own == level).astype(float)
        if not np.any(ind):
            continue
        oyr = np.r_[0.0, np.asarray(t.own_year.get(level, (0.0,) * (len(yr) - 1)), float)]
        odd = np.r_[0.0, np.asarray(t.own_did.get(level, (0.0,) * (len(yr) - 1)), float)]
        v = v + ind * (t.own_main.get(level, 0.0) + oyr[y_pos]
                       + t.own_treated.get(level, 0.0) * treated + odd[y_pos] * treated)
    return v


def four_means_did(panel: PanelDataset, outcome: str, pre_year: int, post_year: int) -> float:
    """
    ``(treated post - treated pre) - (control post - control pre)`` over
    unweighted cell means.

    Raises
    ------
    ValueError
        A group has no observed cells in one of the two years.
    """
    frame = panel._frame
    col = PANEL_OUTCOME_COLUMNS[outcome]
    means = {}
    for g in (0, 1):
        for y in (pre_year, post_year):
            sel = frame[(frame["treated"] == g) & (frame["year"] == y)][col].dropna()
            if sel.empty:
                label = "treated" if g else "control"
                raise ValueError(f"{label} group has no {outcome} cells in {y}")
            means[g, y] = float(sel.mean())
    return (means[1, post_year] - means[1, pre_year]) - (means[0, post_year] - means[0, pre_year])


def true_did_coefficients(truth: GeneratorTruth, mode: str, scheme="base",
                          n_probe: int = PROBE_DRAWS) -> pd.DataFrame:
    """
    Truth for every DID term of ``scheme`` as a (term, outcome, truth) frame.

    In panel mode the ``TREATED:YEAR`` truth of a scheme that omits the
    surgical or ownership interactions is the DID averaged over the
    generator's surgical share and ownership mix.
    """
    from .did import InteractionScheme, SchemeKind
    scheme = InteractionScheme.coerce(scheme)
    years = truth.years[1:]
    rows = []
    if mode == "patient":
        if scheme.kind is not SchemeKind.BASE:
            raise ConfigError("patient-mode truth is available for the base scheme only")
        for o in scheme.outcomes(tuple(truth.patient)):
            vals = panel_truth(truth, o, n_probe)
            rows += [{"term": f"TREATED:YEAR_{y}", "outcome": o, "truth": float(v)}
                     for y, v in zip(years, vals)]
    elif mode == "panel":
        # effect heterogeneity a scheme does not model averages into its DID
        # terms with the expected composition of the treated wards
        shares = dict(zip([o.value for o in Ownership], truth.ownership_mix))
        for o in scheme.outcomes(tuple(truth.panel)):
            t = truth.panel[o]
            did = np.asarray(t.did, float)
            if scheme.kind is not SchemeKind.SURGICAL:
                did = did + truth.surgical_fraction * np.asarray(t.surgical_did, float)
            if scheme.kind is not SchemeKind.OWNERSHIP:
                for level in ("NOPROFIT", "PROFIT"):
                    d = np.asarray(t.own_did.get(level, (0.0,) * len(years)), float)
                    did = did + shares[level] * d
            rows += [{"term": f"TREATED:YEAR_{y}", "outcome": o, "truth": float(v)}
                     for y, v in zip(years, did)]
            if scheme.kind is SchemeKind.SURGICAL:
                rows += [{"term": f"SURGICAL:TREATED:YEAR_{y}", "outcome": o, "truth": float(v)}
                         for y, v in zip(years, t.surgical_did)]
            elif scheme.kind is SchemeKind.OWNERSHIP:
                for level in ("NOPROFIT", "PROFIT"):
                    d = t.own_did.get(level, (0.0,) * len(years))
                    rows += [{"term": f"OWN_{level}:TREATED:YEAR_{y}", "outcome": o,
                              "truth": float(v)} for y, v in zip(years, d)]
    else:
        raise ConfigError(f"mode must be 'patient' or 'panel', got {mode!r}")
    return pd.DataFrame(rows, columns=["term", "outcome", "truth"])


@dataclass
class RecoveryReport:
    """
    Per parameter: truth, mean estimate, bias, empirical SE, Monte-Carlo SE
    of the mean, coverage of nominal 95% intervals, and replicate counts.
    """

    table: pd.DataFrame
    replicates: int
    n_failed: int
    estimates: np.ndarray = field(repr=False, default=None)
    lower: np.ndarray = field(repr=False, default=None)
    upper: np.ndarray = field(repr=False, default=None)
    interval: str = "bootstrap-percentile"

    def to_csv(self, path) -> None:
        self.table.to_csv(path, index=False, lineterminator="\n")

    def to_dict(self) -> dict:
        return {
            "replicates": self.replicates,
            "n_failed": self.n_failed,
            "interval": self.interval,
            "parameters": json.loads(self.table.to_json(orient="records", double_precision=15)),
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def row(self, term: str, outcome: str) -> pd.Series:
        t = self.table
        return t[(t["term"] == term) & (t["outcome"] == outcome)].iloc[0]


def _replicate_seed(seed: int, r: int) -> int:
    return int(np.random.SeedSequence([seed, r]).generate_state(1)[0])


def run_replicate(truth: GeneratorTruth, r: int, mode: str, scheme, terms, bootstrap: int,
                  config: Optional[StudyConfig], fit_kwargs: dict):
    """
    One closed-loop replicate. Returns (estimates, lower, upper) aligned with
    ``terms`` (a list of (term, outcome)), or None on failure.
    """
    from .did import build_design, fit_multivariate_mixed
    from .inference import cluster_bootstrap
    from .riskadjust import risk_adjust

    seed = _replicate_seed(truth.seed, r)
    try:
        if mode == "patient":
            ds = generate_synthetic(truth, seed=seed)
            cfg = config or truth.study_config()
            cfg = replace(cfg, outcomes=tuple(o for o in OUTCOMES if o in truth.patient))
            panel, _ = risk_adjust(ds, cfg)
        else:
            panel = generate_panel(truth, seed=seed)
            cfg = config
        design = build_design(panel, scheme, config=cfg)
        fit = fit_multivariate_mixed(design, **fit_kwargs)
        if not fit.converged:
            return None
        est = np.array([fit.coef.loc[t, o] for t, o in terms])
        if bootstrap:
            boot = cluster_bootstrap(design, scheme, B=bootstrap, seed=seed, fit=fit, **fit_kwargs)
            if not boot.valid:
                return None
            bt = boot.table.set_index(["term", "outcome"])
            lo = np.array([bt.loc[(t, o), "ci_low"] for t, o in terms])
            hi = np.array([bt.loc[(t, o), "ci_high"] for t, o in terms])
        else:
            se = fit.se()
            s = np.array([se.loc[t, o] for t, o in terms])
            lo, hi = est - 1.959964 * s, est + 1.959964 * s
        return est, lo, hi
    except (P4PError, ArithmeticError, np.linalg.LinAlgError) as exc:
        logger.warning("replicate %d failed: %s", r, exc)
        return None


def _run_many(args):
    truth, rs, mode, scheme, terms, bootstrap, config, fit_kwargs = args
    return [run_replicate(truth, r, mode, scheme, terms, bootstrap, config, fit_kwargs) for r in rs]


def recovery_study(truth: GeneratorTruth, replicates: int, mode: str = "patient",
                   scheme="base", bootstrap: int = 0, config: Optional[StudyConfig] = None,
                   workers: int = 1, truth_table: Optional[pd.DataFrame] = None,
                   min_replicates: int = 50, **fit_kwargs) -> RecoveryReport:
    """
    Closed-loop parameter recovery.

    Parameters
    ----------
    mode : {'patient', 'panel'}
        ``patient`` runs generate -> risk adjust -> collapse -> fit;
        ``panel`` draws the ward-month panel directly from the second-stage
        model.
    bootstrap : int
        Inner bootstrap replicates per outer replicate; 0 uses model-based
        Wald intervals instead.
    truth_table : DataFrame, optional
        Precomputed truth (term, outcome, truth); computed otherwise.
    """
    if replicates < min_replicates:
        raise ConfigError(f"recovery_study needs at least {min_replicates} replicates")
    if truth_table is None:
        truth_table = true_did_coefficients(truth, mode, scheme)
    terms = list(zip(truth_table["term"], truth_table["outcome"]))
    args = (mode, scheme, terms, bootstrap, config, fit_kwargs)
    if workers > 1:
        chunks = [list(c) for c in np.array_split(np.arange(replicates), workers) if len(c)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_many, [(truth, c) + args for c in chunks]))
        results = [r for part in parts for r in part]
    else:
        results = [run_replicate(truth, r, *args) for r in range(replicates)]
    ok = [r for r in results if r is not None]
    n_failed = replicates - len(ok)
    k = len(terms)
    est = np.array([r[0] for r in ok]).reshape(len(ok), k)
    lo = np.array([r[1] for r in ok]).reshape(len(ok), k)
    hi = np.array([r[2] for r in ok]).reshape(len(ok), k)
    tv = truth_table["truth"].to_numpy()
    n = len(ok)
    mean = est.mean(axis=0) if n else np.full(k, np.nan)
    sd = est.std(axis=0, ddof=1) if n > 1 else np.full(k, np.nan)
    cover = ((lo <= tv) & (tv <= hi)).mean(axis=0) if n else np.full(k, np.nan)
    table = truth_table.copy()
    table["mean_estimate"] = mean
    table["bias"] = mean - tv
    table["empirical_se"] = sd
    table["mc_se"] = sd / np.sqrt(max(n, 1))
    table["coverage"] = cover
    table["n_replicates"] = n
    return RecoveryReport(table, replicates, n_failed, est, lo, hi,
                          "bootstrap-percentile" if bootstrap else "model-wald")
