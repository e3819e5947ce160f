"""
Stage one: patient-level risk adjustment.

A logistic model with random intercepts for ward-years nested in
hospital-years is fitted per outcome by Laplace-approximate maximum
likelihood. Predicted probabilities are then averaged within each
ward-month to give the panel used by the DID stage.

The penalised Newton solve exploits the nesting: every ward-year belongs to
exactly one hospital-year, so after eliminating the ward-year block the
hospital-year block is still diagonal and only a ``p x p`` system in the
fixed effects needs a dense factorisation.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
import pandas as pd
from scipy.special import expit

from .core import (OUTCOMES, PATIENT_COVARIATES, WARD_COVARIATES, AdmissionDataset,
                   Ownership, StudyConfig)
from .exceptions import SeparationError, StructureError, ValidationError
from .numerics import (SEPARATION_BOUND, OptimResult, cholesky_solve, fd_hessian,
                       abs_eigen_inverse, log1pexp, quasi_newton_minimize)

logger = logging.getLogger(__name__)

PANEL_OUTCOME_COLUMNS = {
    "mortality": "ho_mortality",
    "readmissions": "ho_readmissions",
    "return_or": "ho_return",
    "transfers": "ho_transfers",
    "voldisch": "ho_voldisch",
}
PANEL_COLUMNS = ("hospital_id", "ward_id", "year", "month", "month_index", "treated",
                 "surgical", "ownership", "n_patients") + tuple(PANEL_OUTCOME_COLUMNS.values())

_PIRLS_STEP_TOL = 1e-9
_PIRLS_MAX_ITER = 60
_LOG_VARIANCE_BOUND = 50.0


@dataclass(frozen=True)
class LogisticMixedSpec:
    """
    Model specification for one outcome.

    ``fixed_variances`` pins the (ward-year, hospital-year) variances instead
    of estimating them; a zero removes that random effect entirely.
    """

    outcome: str
    covariates: tuple = PATIENT_COVARIATES
    ward_covariates: bool = False
    fixed_variances: Optional[tuple] = None
    start_variances: Optional[tuple] = None
    tol: float = 1e-3
    max_iter: int = 500

    @property
    def all_covariates(self) -> tuple:
        covs = tuple(self.covariates)
        if self.ward_covariates:
            covs += tuple(c for c in WARD_COVARIATES if c not in covs)
        return covs


@dataclass
class LogisticMixedFit:
    outcome: str
    alpha: float
    eta: pd.Series
    sigma_mu_sq: float
    sigma_nu_sq: float
    mu_hat: pd.Series = field(repr=False)
    nu_hat: pd.Series = field(repr=False)
    loglik: float
    converged: bool
    n_obs: int
    optim: Optional[OptimResult] = field(default=None, repr=False)


class _NestedLogitProblem:
    """
    Design, grouping and a warm-started penalised IRLS for one outcome.

    Records are put in a canonical order (hospital, ward, year, ...), so
    ward-years are contiguous and every reduction runs in a fixed order
    whatever the input order was.
    """

    def __init__(self, frame: pd.DataFrame, outcome: str, covariates):
        h_codes, h_labels = pd.factorize(frame["hospital_id"], sort=True)
        w_codes, w_labels = pd.factorize(frame["ward_id"], sort=True)
        year = frame["year"].to_numpy()
        raw = frame[list(covariates)].to_numpy(dtype=np.float64)
        y = frame[outcome].to_numpy(dtype=np.float64)
        keys = [h_codes, w_codes, year, frame["month"].to_numpy()] + \
            [raw[:, j] for j in range(raw.shape[1])] + [y]
        order = np.lexsort(keys[::-1])
        h_codes, w_codes, year = h_codes[order], w_codes[order], year[order]
        self.y = y[order]
        raw = raw[order]
        self.center = raw.mean(axis=0)
        scale = raw.std(axis=0)
        self.scale = np.where(scale > 0, scale, 1.0)
        self.X = np.column_stack([np.ones(len(self.y)), (raw - self.center) / self.scale])
        self.covariates = tuple(covariates)

        n = len(self.y)
        new_wy = np.r_[True, (h_codes[1:] != h_codes[:-1]) | (w_codes[1:] != w_codes[:-1])
                       | (year[1:] != year[:-1])]
        self.starts = np.flatnonzero(new_wy)
        self.wi = np.cumsum(new_wy) - 1
        wy_h = h_codes[self.starts]
        wy_w = w_codes[self.starts]
        wy_y = year[self.starts]
        hy_keys = wy_h.astype(np.int64) * (int(year.max()) + 1) + wy_y
        hy_unique, self.wy_to_hy = np.unique(hy_keys, return_inverse=True)
        self.wy_to_hy = self.wy_to_hy.ravel()
        self.hi = self.wy_to_hy[self.wi]
        self.wy_index = pd.MultiIndex.from_arrays(
            [np.asarray(h_labels)[wy_h], np.asarray(w_labels)[wy_w], wy_y],
            names=["hospital_id", "ward_id", "year"])
        first = np.unique(self.wy_to_hy, return_index=True)[1]
        self.hy_index = pd.MultiIndex.from_arrays(
            [np.asarray(h_labels)[wy_h[first]], wy_y[first]], names=["hospital_id", "year"])
        self.n, self.p = n, self.X.shape[1]
        self.nu = len(self.starts)
        self.nv = len(hy_unique)
        self._mode = None
        self._cache = {}

    def moment_start(self):
        """Rough variance components from empirical logits, used as a starting point."""
        def between(ys, ns):
            p = (ys + 0.5) / (ns + 1.0)
            lg = np.log(p / (1 - p))
            return float(np.var(lg) - np.mean(1.0 / ((ns + 1.0) * p * (1 - p))))
        n_wy = np.diff(np.r_[self.starts, self.n]).astype(float)
        y_wy = self._wy_sum(self.y)
        b_wy = between(y_wy, n_wy)
        b_hy = between(self._hy_sum(y_wy), self._hy_sum(n_wy))
        wards = self.nu / self.nv
        sv = max(b_hy - max(b_wy, 0.0) / wards, 0.02)
        su = max(b_wy - sv, 0.02)
        return su, sv

    # -- group sums ----------------------------------------------------------------

    def _wy_sum(self, values):
        """Sum over the records of each ward-year (rows or vectors)."""
        return np.add.reduceat(values, self.starts, axis=0)

    def _hy_sum(self, values):
        """Sum of ward-year quantities over the ward-years of each hospital-year."""
        if values.ndim == 1:
            return np.bincount(self.wy_to_hy, weights=values, minlength=self.nv)
        return np.column_stack([np.bincount(self.wy_to_hy, weights=values[:, j], minlength=self.nv)
                                for j in range(values.shape[1])])

    # -- structured Newton pieces -------------------------------------------------

    def _linear(self, beta, u, v):
        eta = self.X @ beta
        if u is not None and v is not None:
            eta += (u + v[self.wy_to_hy])[self.wi]
        elif u is not None:
            eta += u[self.wi]
        elif v is not None:
            eta += v[self.hi]
        return eta

    def _penalised(self, eta, u, v, su, sv):
        val = 2.0 * float(np.sum(log1pexp(eta) - self.y * eta))
        if u is not None:
            val += float(u @ u) / su
        if v is not None:
            val += float(v @ v) / sv
        return val

    def _blocks(self, w, su, sv):
        """
        Eliminated pieces of the Hessian ``C'WC + diag(0, I/su, I/sv)``.

        With the ward-year block eliminated (diagonal ``d``), the
        hospital-year block stays diagonal (``e``); the fixed effects are
        left with the dense Schur complement ``S``.
        """
        X = self.X
        Xw = X * w[:, None]
        S = X.T @ Xw
        blk = {"S": S}
        Wu = self._wy_sum(w)
        if su:
            Cu = self._wy_sum(Xw)
            d = Wu + 1.0 / su
            S = S - Cu.T @ (Cu / d[:, None])
            blk.update(Wu=Wu, Cu=Cu, d=d)
        if sv:
            if su:
                f = Wu / d
                Cv = self._hy_sum(Cu * (1.0 - f)[:, None])
                e = self._hy_sum(Wu * (1.0 - f)) + 1.0 / sv
            else:
                Cv = self._hy_sum(self._wy_sum(Xw))
                e = self._hy_sum(Wu) + 1.0 / sv
            S = S - Cv.T @ (Cv / e[:, None])
            blk.update(Cv=Cv, e=e)
        blk["S"] = S
        return blk

    def _solve(self, blk, su, sv, r_b, r_u, r_v):
        """Solve the full Hessian system for right-hand side (r_b, r_u, r_v)."""
        if su:
            d, Cu, Wu = blk["d"], blk["Cu"], blk["Wu"]
            r_b = r_b - Cu.T @ (r_u / d)
        if sv:
            e, Cv = blk["e"], blk["Cv"]
            if su:
                r_v = r_v - self._hy_sum(Wu * r_u / d)
            r_b = r_b - Cv.T @ (r_v / e)
        x_b = cholesky_solve(blk["S"], r_b)
        x_v = (r_v - Cv @ x_b) / e if sv else None
        if su:
            rhs = r_u - Cu @ x_b
            if sv:
                rhs = rhs - Wu * x_v[self.wy_to_hy]
            x_u = rhs / d
        else:
            x_u = None
        return x_b, x_u, x_v

    def _newton_step(self, beta, u, v, su, sv):
        eta = self._linear(beta, u, v)
        mu = expit(eta)
        w = mu * (1.0 - mu)
        resid = self.y - mu
        r_b = self.X.T @ resid
        r_u = self._wy_sum(resid) - u / su if su else None
        if sv:
            rw = self._wy_sum(resid)
            r_v = self._hy_sum(rw) - v / sv
        else:
            r_v = None
        return self._solve(self._blocks(w, su, sv), su, sv, r_b, r_u, r_v)

    def mode(self, su, sv, start=None):
        """Joint posterior mode of (beta, u, v) for fixed variances."""
        if start is None:
            start = self._mode
        if start is None:
            ybar = np.clip(self.y.mean(), 1e-6, 1 - 1e-6)
            beta = np.zeros(self.p)
            beta[0] = np.log(ybar / (1 - ybar))
            u = np.zeros(self.nu)
            v = np.zeros(self.nv)
        else:
            beta, u, v = (a.copy() for a in start)
        uu = u if su else None
        vv = v if sv else None
        obj = self._penalised(self._linear(beta, uu, vv), uu, vv, su, sv)
        for _ in range(_PIRLS_MAX_ITER):
            d_beta, d_u, d_v = self._newton_step(beta, uu, vv, su, sv)
            step = 1.0
            for _ in range(30):
                nb = beta + step * d_beta
                nu_ = uu + step * d_u if su else None
                nv_ = vv + step * d_v if sv else None
                new_obj = self._penalised(self._linear(nb, nu_, nv_), nu_, nv_, su, sv)
                if np.isfinite(new_obj) and new_obj <= obj + 1e-10 * (abs(obj) + 1.0):
                    break
                step *= 0.5
            beta, uu, vv, obj = nb, nu_, nv_, new_obj
            size = max(np.max(np.abs(step * d_beta)),
                       np.max(np.abs(step * d_u)) if su else 0.0,
                       np.max(np.abs(step * d_v)) if sv else 0.0)
            if size < _PIRLS_STEP_TOL:
                break
            if np.max(np.abs(beta)) > 10 * SEPARATION_BOUND:
                break
        u = uu if su else np.zeros(self.nu)
        v = vv if sv else np.zeros(self.nv)
        self._mode = (beta, u, v)
        return beta, u, v

    def evaluate(self, su, sv, want_grad=False):
        """
        Laplace deviance (-2 log marginal likelihood) and, optionally, its
        exact gradient with respect to (log su, log sv).

        The gradient differentiates through the random-effect mode: the
        penalised deviance is stationary there, so only the log-determinant
        term needs the implicit derivative of the mode.
        """
        key = (su, sv)
        hit = self._cache.get(key)
        if hit is not None and (hit[1] is not None or not want_grad):
            return hit
        beta, u, v = self.mode(su, sv)
        uu = u if su else None
        vv = v if sv else None
        eta = self._linear(beta, uu, vv)
        mu = expit(eta)
        w = mu * (1.0 - mu)
        dev = self._penalised(eta, uu, vv, su, sv)
        Wu = self._wy_sum(w)
        if su:
            d = Wu + 1.0 / su
            dev += float(np.sum(np.log1p(su * Wu)))
        if sv:
            if su:
                e_red = self._hy_sum(Wu - Wu * Wu / d)
            else:
                e_red = self._hy_sum(Wu)
            dev += float(np.sum(np.log1p(sv * e_red)))
        grad = None
        if want_grad:
            grad = self._gradient(su, sv, u, v, mu, w, Wu)
        self._cache = {key: (dev, grad)}
        return dev, grad

    def _gradient(self, su, sv, u, v, mu, w, Wu):
        # random-effect precision block M = Z'WZ + D^-1 and the diagonal of its inverse
        if su:
            d = Wu + 1.0 / su
            f = Wu / d
        if sv:
            e = (self._hy_sum(Wu * (1.0 - f)) if su else self._hy_sum(Wu)) + 1.0 / sv
            inv_e = 1.0 / e
        if su and sv:
            ie = inv_e[self.wy_to_hy]
            lev_wy = 1.0 / d + (1.0 - f) ** 2 * ie
            tr_u = float(np.sum(1.0 / d + f * f * ie))
            tr_v = float(np.sum(inv_e))
        elif su:
            lev_wy = 1.0 / d
            tr_u = float(np.sum(1.0 / d))
        else:
            lev_wy = inv_e[self.wy_to_hy]
            tr_v = float(np.sum(inv_e))
        # derivative of log det M along the linear predictor of each record
        dw = np.repeat(lev_wy, np.diff(np.r_[self.starts, self.n])) * w * (1.0 - 2.0 * mu)
        g_b = self.X.T @ dw
        g_wy = self._wy_sum(dw)
        g_u = g_wy if su else None
        g_v = self._hy_sum(g_wy) if sv else None
        blk = self._blocks(w, su, sv)
        out = []
        for which in ("u", "v"):
            if which == "u" and not su or which == "v" and not sv:
                out.append(0.0)
                continue
            r_b = np.zeros(self.p)
            r_u = (u / su) if which == "u" else (np.zeros(self.nu) if su else None)
            r_v = (v / sv) if which == "v" else (np.zeros(self.nv) if sv else None)
            x_b, x_u, x_v = self._solve(blk, su, sv, r_b, r_u, r_v)
            implicit = float(g_b @ x_b)
            if su:
                implicit += float(g_u @ x_u)
            if sv:
                implicit += float(g_v @ x_v)
            if which == "u":
                direct = -float(u @ u) / su + self.nu - tr_u / su
            else:
                direct = -float(v @ v) / sv + self.nv - tr_v / sv
            out.append(direct + implicit)
        return np.array(out)

    def laplace_deviance(self, su, sv):
        """-2 log of the Laplace-approximated marginal likelihood."""
        return self.evaluate(su, sv)[0]


def _check_structure(frame, outcome):
    hospitals = frame["hospital_id"].nunique()
    if hospitals < 2:
        raise StructureError(f"{outcome}: outcome observed in {hospitals} hospital(s); need >= 2")
    n_wy = len(frame.drop_duplicates(["hospital_id", "ward_id", "year"]))
    if n_wy < 2:
        raise StructureError(f"{outcome}: {n_wy} ward-year(s); random effect inestimable")
    y = frame[outcome].to_numpy()
    if np.all(y == y[0]):
        raise SeparationError(f"{outcome}: outcome is constant across all records")


def _outcome_frame(ds: AdmissionDataset, outcome: str) -> pd.DataFrame:
    frame = ds._frame
    if outcome == "return_or":
        frame = frame[frame["surgical"] == 1]
    return frame


def fit_logistic_mixed(ds: AdmissionDataset, spec: LogisticMixedSpec) -> LogisticMixedFit:
    """
    Fit the nested random-intercept logistic model for one outcome.

    For ``return_or`` the data are restricted to surgical wards. Variance
    components are optimised on the log scale by BFGS over the Laplace
    deviance; fixed effects and random-effect modes come from the inner
    penalised IRLS.

    Raises
    ------
    StructureError
        Fewer than two hospitals or ward-years carry the outcome.
    SeparationError
        Outcome constant, or a fixed effect diverges.
    """
    if spec.outcome not in OUTCOMES:
        raise ValueError(f"unknown outcome {spec.outcome!r}")
    covs = spec.all_covariates
    if not covs:
        raise ValueError("at least one covariate is required")
    frame = _outcome_frame(ds, spec.outcome)
    _check_structure(frame, spec.outcome)
    prob = _NestedLogitProblem(frame, spec.outcome, covs)

    optim = None
    if spec.fixed_variances is not None:
        su, sv = (float(s) for s in spec.fixed_variances)
        if su < 0 or sv < 0:
            raise ValueError("fixed variances must be non-negative")
        converged = True
    else:
        def objective(theta):
            if np.any(np.abs(theta) > _LOG_VARIANCE_BOUND):
                return np.inf
            return prob.evaluate(np.exp(theta[0]), np.exp(theta[1]))[0]

        def gradient(theta):
            return prob.evaluate(np.exp(theta[0]), np.exp(theta[1]), want_grad=True)[1]

        start = spec.start_variances or prob.moment_start()
        x0 = np.log(np.asarray(start, dtype=float))
        # curvature at the start point fixes the badly scaled hospital-year direction
        h0 = abs_eigen_inverse(fd_hessian(gradient, x0))
        optim = quasi_newton_minimize(objective, x0, tol=spec.tol, grad=gradient,
                                      max_iter=spec.max_iter, max_step=2.0, inv_hessian0=h0)
        su, sv = (float(s) for s in np.exp(optim.argmin))
        converged = optim.converged
        if not converged:
            logger.warning("%s: variance optimisation did not converge (%s)",
                           spec.outcome, optim.message)

    beta, u, v = prob.mode(su, sv)
    dev = prob.laplace_deviance(su, sv)
    if np.max(np.abs(beta)) > SEPARATION_BOUND:
        raise SeparationError(f"{spec.outcome}: fixed effect exceeded {SEPARATION_BOUND:g} "
                              "on the logit scale")
    slopes = beta[1:] / prob.scale
    alpha = float(beta[0] - slopes @ prob.center)
    return LogisticMixedFit(
        outcome=spec.outcome,
        alpha=alpha,
        eta=pd.Series(slopes, index=list(covs), name="eta"),
        sigma_mu_sq=su,
        sigma_nu_sq=sv,
        mu_hat=pd.Series(u, index=prob.wy_index, name="mu_hat"),
        nu_hat=pd.Series(v, index=prob.hy_index, name="nu_hat"),
        loglik=-0.5 * dev,
        converged=bool(converged),
        n_obs=prob.n,
        optim=optim,
    )


@dataclass
class Predictions:
    """Per-record probabilities; ``n_unseen`` records fell back to population level."""

    values: np.ndarray
    n_unseen: int

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def __len__(self):
        return len(self.values)


def _lookup(series: pd.Series, keys: pd.MultiIndex):
    pos = series.index.get_indexer(keys)
    vals = np.where(pos >= 0, series.to_numpy()[np.maximum(pos, 0)], 0.0)
    return vals, pos < 0


def predict_probabilities(fit: LogisticMixedFit, ds: AdmissionDataset) -> Predictions:
    """
    Patient-level predicted probabilities including the predicted random effects.

    Records whose ward-year or hospital-year was not in the fitting data get
    a zero effect for the missing level and are counted in ``n_unseen``.
    ``return_or`` is undefined on medical wards; those records get NaN.
    """
    frame = ds._frame
    X = frame[list(fit.eta.index)].to_numpy(dtype=np.float64)
    lin = fit.alpha + X @ fit.eta.to_numpy()
    wy = pd.MultiIndex.from_frame(frame[["hospital_id", "ward_id", "year"]])
    hy = pd.MultiIndex.from_frame(frame[["hospital_id", "year"]])
    mu, miss_u = _lookup(fit.mu_hat, wy)
    nu, miss_v = _lookup(fit.nu_hat, hy)
    p = expit(lin + mu + nu)
    if fit.outcome == "return_or":
        medical = frame["surgical"].to_numpy() == 0
        p = np.where(medical, np.nan, p)
        miss_u = miss_u & ~medical
        miss_v = miss_v & ~medical
    n_unseen = int(np.sum(miss_u | miss_v))
    if n_unseen:
        logger.warning("%s: %d records from unseen ward-years use population-level predictions",
                       fit.outcome, n_unseen)
    return Predictions(p, n_unseen)


class PanelDataset:
    """
    Ward-month panel of risk-adjusted outcomes.

    ``frame`` has the columns of ``PANEL_COLUMNS`` and one row per
    (hospital, ward, year, month). ``ho_return`` is NaN for medical wards;
    outcome columns not modelled are entirely NaN.
    """

    def __init__(self, frame: pd.DataFrame, first_year: Optional[int] = None,
                 validate: bool = True):
        frame = frame.loc[:, list(PANEL_COLUMNS)].reset_index(drop=True)
        if first_year is None:
            first_year = int(frame["year"].min())
        self.first_year = first_year
        if validate:
            _check_panel(frame, first_year)
        self._frame = frame

    @property
    def frame(self) -> pd.DataFrame:
        return self._frame.copy()

    def __len__(self):
        return len(self._frame)

    @property
    def outcomes(self) -> tuple:
        """Outcomes with at least one non-missing value, in canonical order."""
        return tuple(o for o, c in PANEL_OUTCOME_COLUMNS.items()
                     if self._frame[c].notna().any())

    @property
    def hospitals(self) -> np.ndarray:
        return np.unique(self._frame["hospital_id"].to_numpy())

    @property
    def years(self) -> tuple:
        return tuple(sorted(int(y) for y in self._frame["year"].unique()))


def _check_panel(frame, first_year):
    keys = frame[["hospital_id", "ward_id", "year", "month"]]
    if keys.duplicated().any():
        raise ValidationError("panel keys (hospital, ward, year, month) are not unique")
    if (frame["n_patients"] < 1).any():
        raise ValidationError("panel cell with n_patients < 1")
    expected = 12 * (frame["year"] - first_year) + frame["month"]
    if (frame["month_index"] != expected).any():
        raise ValidationError("month_index inconsistent with year and month")
    for col in PANEL_OUTCOME_COLUMNS.values():
        v = frame[col].to_numpy(dtype=float)
        ok = np.isnan(v) | ((v >= 0) & (v <= 1))
        if not ok.all():
            raise ValidationError(f"{col} outside [0, 1] at row {np.flatnonzero(~ok)[0]}")
    medical_return = (frame["surgical"] == 0) & frame["ho_return"].notna()
    if medical_return.any():
        raise ValidationError("ho_return defined only for surgical wards")
    if not frame["ownership"].isin([o.value for o in Ownership]).all():
        raise ValidationError("unknown ownership code in panel")


def collapse_to_panel(ds: AdmissionDataset, probs: Mapping[str, np.ndarray],
                      first_year: Optional[int] = None) -> PanelDataset:
    """
    Average predicted probabilities over the patients of each ward-month.

    ``probs`` maps outcome name to a vector aligned with ``ds``; the
    ``return_or`` vector may hold NaN (or anything) on medical records,
    which are ignored. Empty ward-months do not appear.
    """
    frame = ds._frame
    n = len(frame)
    keys = ["hospital_id", "ward_id", "year", "month"]
    data = frame[keys + ["treated", "surgical", "ownership"]].copy()
    for outcome, column in PANEL_OUTCOME_COLUMNS.items():
        if outcome in probs:
            p = np.asarray(probs[outcome], dtype=np.float64)
            if p.shape != (n,):
                raise ValueError(f"probability vector for {outcome} has length {p.shape}, "
                                 f"expected {n}")
            if outcome == "return_or":
                p = np.where(frame["surgical"].to_numpy() == 1, p, np.nan)
            data[column] = p
        else:
            data[column] = np.nan
    g = data.groupby(keys, sort=True)
    out = g[list(PANEL_OUTCOME_COLUMNS.values())].mean()
    attrs = g[["treated", "surgical", "ownership"]].first()
    out = attrs.join(out)
    out["n_patients"] = g.size()
    out = out.reset_index()
    if first_year is None:
        first_year = ds.config.first_year if ds.config is not None else int(out["year"].min())
    out["month_index"] = 12 * (out["year"] - first_year) + out["month"]
    return PanelDataset(out, first_year)


def read_panel(path, first_year: Optional[int] = None) -> PanelDataset:
    frame = pd.read_csv(path, dtype={"hospital_id": str, "ward_id": str, "ownership": str},
                        keep_default_na=False, float_precision="round_trip",
                        na_values={c: [""] for c in PANEL_OUTCOME_COLUMNS.values()})
    missing = [c for c in PANEL_COLUMNS if c not in frame.columns]
    if missing:
        raise ValidationError(f"panel file lacks columns {missing}")
    for c in ("year", "month", "month_index", "treated", "surgical", "n_patients"):
        frame[c] = frame[c].astype(np.int64)
    for c in PANEL_OUTCOME_COLUMNS.values():
        frame[c] = frame[c].astype(np.float64)
    return PanelDataset(frame, first_year)


def write_panel(panel: PanelDataset, path) -> None:
    panel._frame.to_csv(path, index=False, lineterminator="\n", na_rep="")


def _fit_one(args):
    ds, spec = args
    return fit_logistic_mixed(ds, spec)


def risk_adjust(ds: AdmissionDataset, config: Optional[StudyConfig] = None, workers: int = 1):
    """
    Fit every configured outcome, predict and collapse to the ward-month panel.

    Returns
    -------
    panel : PanelDataset
    fits : dict
        Outcome name to :class:`LogisticMixedFit`.
    """
    config = config or ds.config or StudyConfig()
    specs = [LogisticMixedSpec(o, ward_covariates=config.ward_covariates, tol=config.glmm_tol,
                               max_iter=config.max_iter) for o in config.outcomes]
    if workers > 1 and len(specs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            fitted = list(pool.map(_fit_one, [(ds, s) for s in specs]))
    else:
        fitted = [fit_logistic_mixed(ds, s) for s in specs]
    fits = {f.outcome: f for f in fitted}
    probs = {o: predict_probabilities(f, ds).values for o, f in fits.items()}
    panel = collapse_to_panel(ds, probs, config.first_year)
    return panel, fits
