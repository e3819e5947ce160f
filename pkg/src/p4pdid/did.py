"""
Stage two: DID design matrices and the multivariate linear mixed model.

Every ward-month cell contributes a vector of risk-adjusted outcomes that
share one fixed-effect design. Each outcome has its own hospital random
intercept (independent across outcomes) and the cell-level errors have an
unstructured covariance ``Sigma`` across outcomes. Outcomes that are
structurally missing in a cell (returns to the operating room on medical
wards) are marginalised out, so the cell still informs the other outcomes.

The likelihood is evaluated from per-(hospital, missingness-pattern)
sufficient statistics, which makes a refit with hospital multiplicity
weights (as used by the cluster bootstrap) cost the same as the original fit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy.linalg import qr

from .core import OUTCOMES, Ownership, StudyConfig
from .exceptions import DesignError, SchemeMismatchError, SingularMatrixError, StructureError
from .numerics import (OptimResult, abs_eigen_inverse, cholesky_factor, cholesky_solve,
                       fd_gradient, fd_hessian, quasi_newton_minimize)
from .riskadjust import PANEL_OUTCOME_COLUMNS, PanelDataset

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
RIDGE = 1e-8


class SchemeKind(str, Enum):
    BASE = "base"
    SURGICAL = "surgical"
    OWNERSHIP = "ownership"


@dataclass(frozen=True)
class InteractionScheme:
    """
    Which group interactions enter the DID design.

    ``base`` has TREATED x YEAR only. ``surgical`` adds a full set of
    SURGICAL interactions (medical wards are the reference) and drops the
    return-to-surgery outcome. ``ownership`` adds interactions for the
    PROFIT and NOPROFIT levels with PUBLIC as the reference.
    """

    kind: SchemeKind = SchemeKind.BASE

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", SchemeKind(self.kind))
        except ValueError:
            raise SchemeMismatchError(f"unknown interaction scheme {self.kind!r}; "
                                      "expected base, surgical or ownership") from None

    @classmethod
    def coerce(cls, scheme) -> "InteractionScheme":
        return scheme if isinstance(scheme, cls) else cls(scheme)

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def levels(self) -> tuple:
        """Non-reference levels carrying their own interaction terms."""
        if self.kind is SchemeKind.SURGICAL:
            return ("SURGICAL",)
        if self.kind is SchemeKind.OWNERSHIP:
            return ("OWN_NOPROFIT", "OWN_PROFIT")
        return ()

    @property
    def level_labels(self) -> dict:
        """Display label for every level, reference included."""
        if self.kind is SchemeKind.SURGICAL:
            return {"medical": None, "surgical": "SURGICAL"}
        if self.kind is SchemeKind.OWNERSHIP:
            return {"PUBLIC": None, "NOPROFIT": "OWN_NOPROFIT", "PROFIT": "OWN_PROFIT"}
        return {}

    def outcomes(self, available: Sequence[str]) -> tuple:
        outs = tuple(o for o in OUTCOMES if o in available)
        if self.kind is SchemeKind.SURGICAL:
            outs = tuple(o for o in outs if o != "return_or")
        return outs


def _level_indicators(frame: pd.DataFrame, scheme: InteractionScheme) -> dict:
    if scheme.kind is SchemeKind.SURGICAL:
        return {"SURGICAL": frame["surgical"].to_numpy(dtype=float)}
    if scheme.kind is SchemeKind.OWNERSHIP:
        own = frame["ownership"].to_numpy()
        return {"OWN_NOPROFIT": (own == Ownership.NOPROFIT.value).astype(float),
                "OWN_PROFIT": (own == Ownership.PROFIT.value).astype(float)}
    return {}


def design_row(scheme: InteractionScheme, years_nonref: Sequence[int], treated: float,
               year: int, month: float, levels: Optional[dict] = None,
               include_month: bool = True) -> np.ndarray:
    """Fixed-effect regressors for one cell, in the column order of :func:`build_design`."""
    levels = levels or {}
    yd = [1.0 if year == j else 0.0 for j in years_nonref]
    row = [1.0, treated] + yd + [treated * v for v in yd]
    if include_month:
        row.append(month)
    for lev in scheme.levels:
        s = float(levels.get(lev, 0.0))
        row += [s] + [s * v for v in yd] + [s * treated] + [s * treated * v for v in yd]
    return np.asarray(row, dtype=float)


def design_columns(scheme: InteractionScheme, years_nonref: Sequence[int],
                   include_month: bool = True) -> list:
    cols = ["(Intercept)", "TREATED"]
    cols += [f"YEAR_{j}" for j in years_nonref]
    cols += [f"TREATED:YEAR_{j}" for j in years_nonref]
    if include_month:
        cols.append("MONTH")
    for lev in scheme.levels:
        cols.append(lev)
        cols += [f"{lev}:YEAR_{j}" for j in years_nonref]
        cols.append(f"{lev}:TREATED")
        cols += [f"{lev}:TREATED:YEAR_{j}" for j in years_nonref]
    return cols


@dataclass
class DidDesign:
    """
    Shared fixed-effect design with a multivariate, partly missing response.

    Attributes
    ----------
    X : ndarray (n, p)
    Y : ndarray (n, K)
        NaN where an outcome is structurally missing.
    groups : ndarray (n,)
        Integer hospital code per row, indexing ``hospitals``.
    cells : DataFrame
        Keys and attributes of the panel cell behind each row.
    """

    scheme: InteractionScheme
    outcomes: tuple
    columns: list
    X: np.ndarray = field(repr=False)
    Y: np.ndarray = field(repr=False)
    groups: np.ndarray = field(repr=False)
    hospitals: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    cells: pd.DataFrame = field(repr=False)
    years: tuple = ()
    reference_year: int = 2010
    first_year: int = 2010
    include_month: bool = True
    _stats: dict = field(default_factory=dict, repr=False)

    @property
    def mask(self) -> np.ndarray:
        return ~np.isnan(self.Y)

    @property
    def years_nonref(self) -> tuple:
        return tuple(y for y in self.years if y != self.reference_year)

    @property
    def n_hospitals(self) -> int:
        return len(self.hospitals)

    def column_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.X, columns=self.columns)


def _collinear_columns(X, names, rtol=1e-10):
    if X.shape[0] == 0:
        return list(names)
    scale = np.linalg.norm(X, axis=0)
    scale[scale == 0] = 1.0
    _, R, piv = qr(X / scale, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > rtol * max(diag[0], 1e-300))) if diag.size else 0
    return [names[i] for i in piv[rank:]]


def build_design(panel: PanelDataset, scheme="base", config: Optional[StudyConfig] = None,
                 include_month: bool = True, outcomes: Optional[Sequence[str]] = None) -> DidDesign:
    """
    Indicator-coded DID design for a ward-month panel.

    One row per cell; MONTH is the running month index. Reference levels are
    the first study year, medical wards and public ownership.

    Raises
    ------
    DesignError
        Columns are collinear on the rows where some outcome is observed, or
        on the rows of one particular outcome; the message names them.
    StructureError
        Fewer than two hospitals, or a group observed in fewer than two years.
    """
    scheme = InteractionScheme.coerce(scheme)
    frame = panel._frame
    available = panel.outcomes if outcomes is None else tuple(outcomes)
    outs = scheme.outcomes(available)
    if not outs:
        raise DesignError("no outcomes available for the design")
    years = tuple(sorted(int(y) for y in frame["year"].unique()))
    if config is not None:
        reference = config.reference_year
        first_year = config.first_year
    else:
        reference = years[0]
        first_year = panel.first_year
    if reference not in years:
        raise StructureError(f"reference year {reference} absent from the panel")
    years_nonref = tuple(y for y in years if y != reference)

    treated = frame["treated"].to_numpy(dtype=float)
    year = frame["year"].to_numpy()
    hosp = frame["hospital_id"].to_numpy()
    hospitals, groups = np.unique(hosp, return_inverse=True)
    if len(hospitals) < 2:
        raise StructureError(f"panel has {len(hospitals)} hospital(s); need >= 2")
    for g in (0, 1):
        n_years = len(np.unique(year[treated == g]))
        if n_years < 2:
            label = "treated" if g else "control"
            raise StructureError(f"{label} group observed in {n_years} year(s); need >= 2")

    yd = np.column_stack([(year == j).astype(float) for j in years_nonref]) \
        if years_nonref else np.empty((len(frame), 0))
    blocks = [np.ones((len(frame), 1)), treated[:, None], yd, treated[:, None] * yd]
    if include_month:
        blocks.append(frame["month_index"].to_numpy(dtype=float)[:, None])
    for lev, s in _level_indicators(frame, scheme).items():
        s = s[:, None]
        blocks += [s, s * yd, s * treated[:, None], s * treated[:, None] * yd]
    X = np.hstack(blocks)
    columns = design_columns(scheme, years_nonref, include_month)
    assert X.shape[1] == len(columns)

    Y = np.column_stack([frame[PANEL_OUTCOME_COLUMNS[o]].to_numpy(dtype=float) for o in outs])
    mask = ~np.isnan(Y)
    rows = mask.any(axis=1)
    bad = _collinear_columns(X[rows], columns)
    if bad:
        raise DesignError(f"design is rank deficient; collinear columns: {', '.join(bad)}", bad)
    for k, o in enumerate(outs):
        bad = _collinear_columns(X[mask[:, k]], columns)
        if bad:
            raise DesignError(f"design is rank deficient on the {o} rows; "
                              f"collinear columns: {', '.join(bad)}", bad)

    cells = frame[["hospital_id", "ward_id", "year", "month", "month_index", "treated",
                   "surgical", "ownership", "n_patients"]].reset_index(drop=True)
    return DidDesign(
        scheme=scheme, outcomes=outs, columns=columns, X=X, Y=Y, groups=groups,
        hospitals=hospitals, weights=frame["n_patients"].to_numpy(dtype=float),
        cells=cells, years=years, reference_year=reference, first_year=first_year,
        include_month=include_month)


# --------------------------------------------------------------------------------------
# sufficient statistics


@dataclass
class _Stats:
    """Per (hospital, pattern) sums on the standardised response scale."""

    patterns: np.ndarray      # (G, K) bool
    cnt: np.ndarray           # (H, G) rows
    N: np.ndarray             # (H, G) sum of weights
    LW: np.ndarray            # (H, G) sum of log weights
    SX: np.ndarray            # (H, G, p)
    SY: np.ndarray            # (H, G, K)
    XX: np.ndarray            # (H, G, p, p)
    XY: np.ndarray            # (H, G, p, K)
    YY: np.ndarray            # (H, G, K, K)
    center: np.ndarray        # (K,)
    scale: np.ndarray         # (K,)
    n_obs_outcome: np.ndarray  # (H, K) observed scalars per hospital and outcome


def _sufficient_stats(design: DidDesign, weighted: bool) -> _Stats:
    key = bool(weighted)
    if key in design._stats:
        return design._stats[key]
    X, Y = design.X, design.Y
    mask = ~np.isnan(Y)
    keep = mask.any(axis=1)
    X, Y, mask = X[keep], Y[keep], mask[keep]
    groups = design.groups[keep]
    w = design.weights[keep] if weighted else np.ones(len(X))
    H = design.n_hospitals
    n, p = X.shape
    K = Y.shape[1]

    center = np.array([Y[mask[:, k], k].mean() for k in range(K)])
    scale = np.array([Y[mask[:, k], k].std() for k in range(K)])
    scale = np.where(scale > 0, scale, 1.0)
    Ys = np.where(mask, (Y - center) / scale, 0.0)

    patterns, pat = np.unique(mask, axis=0, return_inverse=True)
    pat = pat.ravel()
    G = len(patterns)
    cell = groups * G + pat
    order = np.argsort(cell, kind="stable")
    cell_sorted = cell[order]
    starts = np.flatnonzero(np.r_[True, cell_sorted[1:] != cell_sorted[:-1]])
    ids = cell_sorted[starts]

    Xo, Yo, wo = X[order], Ys[order], w[order]
    Xw = Xo * wo[:, None]

    def reduce(a):
        out = np.zeros((H * G,) + a.shape[1:])
        out[ids] = np.add.reduceat(a, starts, axis=0)
        return out.reshape((H, G) + a.shape[1:])

    stats = _Stats(
        patterns=patterns,
        cnt=reduce(np.ones(n)),
        N=reduce(wo),
        LW=reduce(np.log(wo)),
        SX=reduce(Xw),
        SY=reduce(Yo * wo[:, None]),
        XX=reduce(Xw[:, :, None] * Xo[:, None, :]),
        XY=reduce(Xw[:, :, None] * Yo[:, None, :]),
        YY=reduce((Yo * wo[:, None])[:, :, None] * Yo[:, None, :]),
        center=center,
        scale=scale,
        n_obs_outcome=np.column_stack([np.bincount(groups, weights=mask[:, k].astype(float),
                                                   minlength=H) for k in range(K)]),
    )
    design._stats[key] = stats
    return stats


# --------------------------------------------------------------------------------------
# likelihood


class _MvmmObjective:
    """
    Profile deviance of the multivariate mixed model over variance parameters.

    Parameters are ``log a`` (hospital variances, if present) followed by the
    Cholesky factor of ``Sigma`` with log-transformed diagonal (lower
    triangle, row-major; diagonal only when ``diagonal``).
    """

    def __init__(self, stats: _Stats, c: np.ndarray, hospital_variance: bool, diagonal: bool,
                 reml: bool = False):
        self.s = stats
        self.reml = reml
        self.c = c
        self.hv = hospital_variance
        self.diagonal = diagonal
        H, G, p = stats.SX.shape
        K = stats.SY.shape[2]
        self.H, self.G, self.p, self.K = H, G, p, K
        self.tril = (np.arange(K), np.arange(K)) if diagonal else np.tril_indices(K)
        self.na = K if hospital_variance else 0
        self.n_params = self.na + len(self.tril[0])
        cs = c[:, None]
        self.cntc = (cs * stats.cnt).sum(axis=0)                     # (G,)
        self.LWc = (cs * stats.LW).sum(axis=0)
        self.XXc = np.tensordot(c, stats.XX, axes=(0, 0))
        self.XYc = np.tensordot(c, stats.XY, axes=(0, 0))
        self.YYc = np.tensordot(c, stats.YY, axes=(0, 0))
        self.nobs = float((c[:, None] * stats.n_obs_outcome).sum())
        self.csum = float(c.sum())
        self.last = None

    # parameter maps
    def unpack(self, theta):
        K = self.K
        a = np.exp(theta[:self.na]) if self.hv else None
        Lc = np.zeros((K, K))
        Lc[self.tril] = theta[self.na:]
        Lc[np.diag_indices(K)] = np.exp(np.diag(Lc))
        return a, Lc

    def pack(self, a, Sigma):
        Lc = np.linalg.cholesky(Sigma)
        Lc = Lc.copy()
        Lc[np.diag_indices(self.K)] = np.log(np.diag(Lc))
        head = np.log(a) if self.hv else np.empty(0)
        return np.concatenate([head, Lc[self.tril]])

    def _pattern_inverses(self, Sigma):
        G, K = self.G, self.K
        Om = np.zeros((G, K, K))
        logdet = np.zeros(G)
        for g, pat in enumerate(self.s.patterns):
            idx = np.flatnonzero(pat)
            sub = Sigma[np.ix_(idx, idx)]
            ch = np.linalg.cholesky(sub)
            inv = np.linalg.inv(sub)
            Om[g][np.ix_(idx, idx)] = 0.5 * (inv + inv.T)
            logdet[g] = 2.0 * np.sum(np.log(np.diag(ch)))
        return Om, logdet

    def _residual_moments(self, B):
        """Weighted residual cross-products per pattern, summed over hospitals."""
        BXY = np.matmul(B.T[None], self.XYc)                          # (G, K, K)
        BXXB = np.matmul(np.matmul(B.T[None], self.XXc), B[None])
        return self.YYc - BXY - np.transpose(BXY, (0, 2, 1)) + BXXB

    def _posterior(self, Om, a, B):
        """Hospital-effect posterior precision pieces for fixed coefficients."""
        s = self.s
        P = np.tensordot(s.N, Om, axes=(1, 0)) + np.diag(1.0 / a)[None]
        Pinv = np.linalg.inv(P)
        Pinv = 0.5 * (Pinv + np.transpose(Pinv, (0, 2, 1)))
        t = s.SY - np.matmul(s.SX, B)                                  # (H, G, K)
        q = np.einsum("hgl,gkl->hk", t, Om, optimize=True)
        m = np.matmul(Pinv, q[:, :, None])[:, :, 0]
        return P, Pinv, t, q, m

    def evaluate(self, theta, want_grad=False, sigma_override=None):
        """Profile deviance, and optionally its gradient, plus the GLS coefficients."""
        s, c = self.s, self.c
        H, G, p, K = self.H, self.G, self.p, self.K
        fail = (np.inf, None, None) if want_grad else (np.inf, None)
        if sigma_override is not None:
            a, Sigma = sigma_override
            Lc = None
        else:
            a, Lc = self.unpack(theta)
            Sigma = Lc @ Lc.T
        try:
            Om, logdetS = self._pattern_inverses(Sigma)
        except np.linalg.LinAlgError:
            return fail

        Kp = K * p
        Gm = np.zeros((Kp, Kp))
        gv = np.zeros(Kp)
        for g in range(G):
            Gm += np.kron(Om[g], self.XXc[g])
            gv += (Om[g] @ self.XYc[g].T).ravel()
        dev = float(self.cntc @ logdetS) - float(self.LWc @ s.patterns.sum(axis=1))
        if self.hv:
            P = np.tensordot(s.N, Om, axes=(1, 0)) + np.diag(1.0 / a)[None]
            try:
                Pch = np.linalg.cholesky(P)
            except np.linalg.LinAlgError:
                return fail
            Pinv = np.linalg.inv(P)
            Pinv = 0.5 * (Pinv + np.transpose(Pinv, (0, 2, 1)))
            logdetP = 2.0 * np.log(np.diagonal(Pch, axis1=1, axis2=2)).sum(axis=1)
            # L_h = sum_g Om_g kron SX_hg', laid out as (H, K, K*p)
            L = np.zeros((H, K, K, p))
            for g in range(G):
                L += Om[g][None, :, :, None] * s.SX[:, g, None, None, :]
            L = L.reshape(H, K, Kp)
            q0 = np.einsum("hgl,gkl->hk", s.SY, Om, optimize=True)
            PL = np.matmul(Pinv, L)
            Lw = (L * c[:, None, None]).reshape(H * K, Kp)
            Gm -= Lw.T @ PL.reshape(H * K, Kp)
            gv -= Lw.T @ np.matmul(Pinv, q0[:, :, None]).reshape(H * K)
            dev += float(c @ logdetP) + self.csum * float(np.sum(np.log(a)))
        Gm = 0.5 * (Gm + Gm.T)
        b = cholesky_solve(Gm, gv)
        B = b.reshape(K, p).T                                         # (p, K)
        if self.reml:
            # restricted likelihood: integrate the coefficients out as well
            dev += 2.0 * float(np.sum(np.log(np.diag(cholesky_factor(Gm))))) - Kp * LOG_2PI

        Sg = self._residual_moments(B)
        dev += float(np.einsum("gkl,glk->", Om, Sg))
        if self.hv:
            t = s.SY - np.matmul(s.SX, B)                              # (H, G, K)
            q = np.einsum("hgl,gkl->hk", t, Om, optimize=True)
            m = np.matmul(Pinv, q[:, :, None])[:, :, 0]
            dev -= float(c @ np.sum(q * m, axis=1))
        dev += self.nobs * LOG_2PI
        self.last = dict(a=a, Sigma=Sigma, B=B, Ginv_src=Gm)
        if not want_grad:
            return dev, B
        if self.reml:
            raise NotImplementedError("analytic gradient is available for ML only")

        # gradient via the Fisher identity (valid at the profiled coefficients)
        inner = Sg
        if self.hv:
            inner = inner + self._posterior_moments(c, Pinv, t, m)
        Gam = self.cntc @ Om.reshape(G, K * K)
        Gam = Gam.reshape(K, K) - np.sum(np.matmul(np.matmul(Om, inner), Om), axis=0)
        Gam = 0.5 * (Gam + Gam.T)
        grad_parts = []
        if self.hv:
            ga = c @ (1.0 - (np.diagonal(Pinv, axis1=1, axis2=2) + m * m) / a[None, :])
            grad_parts.append(ga)
        dL = 2.0 * Gam @ Lc
        dL[np.diag_indices(K)] *= np.diag(Lc)
        grad_parts.append(dL[self.tril])
        return dev, B, np.concatenate(grad_parts)

    def _posterior_moments(self, c, Pinv, t, m):
        """sum_h c_h [N_hg (P_h^-1 + m m') - t m' - m t'] per pattern."""
        s = self.s
        H, G, K = self.H, self.G, self.K
        cN = c[:, None] * s.N                                          # (H, G)
        second = Pinv + m[:, :, None] * m[:, None, :]                  # (H, K, K)
        Nm = (cN.T @ second.reshape(H, K * K)).reshape(G, K, K)
        ct = t * c[:, None, None]                                      # (H, G, K)
        T = np.einsum("hgk,hl->gkl", ct, m, optimize=True)
        return Nm - T - np.transpose(T, (0, 2, 1))

    def gls_covariance(self):
        """Model-based covariance of the standardised coefficients (outcome-major)."""
        return np.linalg.inv(self.last["Ginv_src"])

    # EM ---------------------------------------------------------------------------
    def em_step(self, a, Sigma):
        """One EM update of (hospital variances, Sigma) at the GLS coefficients."""
        c = self.c
        K = self.K
        Om, _ = self._pattern_inverses(Sigma)
        self.evaluate(None, sigma_override=(a, Sigma))
        B = self.last["B"]
        inner = self._residual_moments(B)
        if self.hv:
            _, Pinv, t, _, m = self._posterior(Om, a, B)
            inner = inner + self._posterior_moments(c, Pinv, t, m)
            a_new = (c @ (np.diagonal(Pinv, axis1=1, axis2=2) + m * m)) / self.csum
        else:
            a_new = a
        S_new = np.zeros((K, K))
        for g in range(self.G):
            # conditional moments of the full error vector given its observed part
            M = Sigma @ Om[g]
            C = Sigma - M @ Sigma
            S_new += M @ inner[g] @ M.T + self.cntc[g] * C
        S_new /= self.cntc.sum()
        S_new = 0.5 * (S_new + S_new.T)
        if self.diagonal:
            S_new = np.diag(np.diag(S_new))
        return a_new, S_new


# --------------------------------------------------------------------------------------
# public fit


@dataclass
class MultivariateMixedFit:
    """
    Estimates of the multivariate mixed DID model on the original ho scale.

    ``coef`` is a terms x outcomes frame; ``cov`` the model-based covariance
    of the stacked coefficients, outcome-major (all terms of the first
    outcome, then the second, ...).
    """

    scheme: InteractionScheme
    outcomes: tuple
    terms: list
    coef: pd.DataFrame
    cov: np.ndarray = field(repr=False)
    sigma_alpha_sq: pd.Series = None
    Sigma: pd.DataFrame = None
    loglik: float = np.nan
    converged: bool = False
    ridge: bool = False
    iterations: int = 0
    message: str = ""
    theta: Optional[np.ndarray] = field(default=None, repr=False)
    design: Optional[DidDesign] = field(default=None, repr=False)
    optim: Optional[OptimResult] = field(default=None, repr=False)
    inv_hessian: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def correlation(self) -> pd.DataFrame:
        d = np.sqrt(np.diag(self.Sigma.to_numpy()))
        return self.Sigma / np.outer(d, d)

    def se(self) -> pd.DataFrame:
        """Model-based standard errors, same shape as ``coef``."""
        p = len(self.terms)
        v = np.sqrt(np.maximum(np.diag(self.cov), 0.0)).reshape(len(self.outcomes), p).T
        return pd.DataFrame(v, index=self.terms, columns=list(self.outcomes))


def _initial_values(stats: _Stats, obj: _MvmmObjective, hospital_variance: bool):
    """Per-outcome OLS residual moments as a starting point."""
    K = obj.K
    Sigma0 = np.eye(K)
    a, Sig = None, None
    # GLS with identity covariance is OLS per outcome on observed rows
    a0 = np.full(K, 0.1) if hospital_variance else None
    obj_tmp = _MvmmObjective(stats, obj.c, False, obj.diagonal)
    obj_tmp.evaluate(None, sigma_override=(None, Sigma0))
    Sg = obj._residual_moments(obj_tmp.last["B"])
    # pairwise moments: restrict each entry to patterns where both are observed
    num = np.zeros((K, K))
    den = np.zeros((K, K))
    for g, pat in enumerate(stats.patterns):
        both = np.outer(pat, pat)
        num += np.where(both, Sg[g], 0.0)
        den += both * obj.N_total_by_pattern[g]
    Sig = num / np.maximum(den, 1.0)
    if hospital_variance:
        a = np.maximum(0.1 * np.diag(Sig), 1e-6)
    return a0 if a is None else a, Sig


def fit_multivariate_mixed(design: DidDesign, *, hospital_variance: bool = True,
                           diagonal_sigma: bool = False, weighted: bool = False,
                           tol: float = 1e-4, max_iter: int = 500, em_iter: int = 10,
                           start: Optional[MultivariateMixedFit] = None,
                           cluster_weights: Optional[np.ndarray] = None,
                           curvature: bool = False, reml: bool = False) -> MultivariateMixedFit:
    """
    Maximum-likelihood fit of the multivariate mixed DID model.

    Parameters
    ----------
    design : DidDesign
    hospital_variance : bool
        Include outcome-specific hospital random intercepts. ``False`` fixes
        their variances at zero.
    diagonal_sigma : bool
        Constrain the residual covariance to be diagonal.
    weighted : bool
        Weight cells by ``n_patients`` (residual covariance ``Sigma / n``).
    tol : float
        Gradient-norm tolerance of the quasi-Newton refinement, on the
        deviance per observed value.
    em_iter : int
        EM iterations run before the quasi-Newton refinement. Ignored when
        ``start`` is given.
    start : MultivariateMixedFit, optional
        Warm start from the variance parameters of an earlier fit of the
        same design.
    cluster_weights : array_like, optional
        Non-negative multiplicity per hospital (``design.hospitals`` order).
    curvature : bool
        Store a finite-difference inverse Hessian of the variance parameters
        at the optimum; later fits warm-started from this one use it as
        their initial quasi-Newton metric.
    reml : bool
        Maximise the restricted likelihood instead. ML is the default so
        that fits with nested fixed effects stay comparable; the REML
        gradient is taken by finite differences, which makes it slower.

    Notes
    -----
    The response is standardised per outcome before fitting and results are
    mapped back, so shifting or rescaling one outcome changes nothing but
    that outcome's own coefficients and variances.
    """
    stats = _sufficient_stats(design, weighted)
    H = design.n_hospitals
    c = np.ones(H) if cluster_weights is None else np.asarray(cluster_weights, dtype=float)
    if c.shape != (H,) or np.any(c < 0):
        raise ValueError("cluster_weights must be a non-negative vector over hospitals")
    if np.count_nonzero(c) < 2:
        raise StructureError("fewer than two hospitals carry weight")
    obj = _MvmmObjective(stats, c, hospital_variance, diagonal_sigma, reml=reml)
    obj.N_total_by_pattern = (c[:, None] * stats.N).sum(axis=0)
    K, p = obj.K, obj.p
    scale_n = max(obj.nobs, 1.0)

    ridge = False
    optim = None
    h0 = None
    inv_h = None
    converged = True
    message = ""
    iterations = 0
    a0, S0 = _initial_values(stats, obj, hospital_variance)
    if diagonal_sigma:
        S0 = np.diag(np.diag(S0))
    if np.min(np.linalg.eigvalsh(S0)) <= 1e-10 * max(np.max(np.diag(S0)), 1.0):
        # residuals (numerically) vanish: the likelihood is unbounded, so keep a ridge
        ridge = True
        Sigma = S0 + RIDGE * np.eye(K)
        a = np.full(K, RIDGE) if hospital_variance else None
        dev, _ = obj.evaluate(None, sigma_override=(a, Sigma))
        message = "residual covariance degenerate; ridge added"
        logger.warning("multivariate fit: %s", message)
        theta = None
    else:
        if start is not None and start.theta is not None and len(start.theta) == obj.n_params:
            theta = np.array(start.theta, dtype=float)
            if start.inv_hessian is not None and start.inv_hessian.shape == (len(theta),) * 2:
                h0 = start.inv_hessian
        else:
            a, Sigma = a0, S0
            for _ in range(em_iter):
                a, Sigma = obj.em_step(a, Sigma)
                if hospital_variance:
                    a = np.maximum(a, 1e-8 * np.max(np.diag(Sigma)))
            theta = obj.pack(a, Sigma)

        def f(th):
            val = obj.evaluate(th)[0]
            return val / scale_n

        def grad(th):
            if reml:
                return fd_gradient(f, th)
            out = obj.evaluate(th, want_grad=True)
            if out[2] is None:
                return np.full(th.shape, np.nan)
            return out[2] / scale_n

        optim = quasi_newton_minimize(f, theta, tol=tol, grad=grad, max_iter=max_iter,
                                      inv_hessian0=h0)
        if curvature:
            inv_h = abs_eigen_inverse(fd_hessian(grad, optim.argmin))
        theta = optim.argmin
        converged = optim.converged
        message = optim.message
        iterations = optim.iterations
        dev = obj.evaluate(theta)[0]
        a, Lc = obj.unpack(theta)
        Sigma = Lc @ Lc.T
        if not converged:
            logger.warning("multivariate fit did not converge: %s", message)

    B = obj.last["B"]
    cov_s = obj.gls_covariance()
    sc, ce = stats.scale, stats.center
    Bo = B * sc[None, :]
    Bo[0, :] += ce
    scale_vec = np.repeat(sc, p)
    cov = cov_s * np.outer(scale_vec, scale_vec)
    Sigma_o = Sigma * np.outer(sc, sc)
    a_o = a * sc ** 2 if hospital_variance else np.zeros(K)
    n_k = (c[:, None] * stats.n_obs_outcome).sum(axis=0)
    jac = float((n_k - p if reml else n_k) @ np.log(sc))
    loglik = -0.5 * dev - jac
    outs = list(design.outcomes)
    return MultivariateMixedFit(
        scheme=design.scheme,
        outcomes=tuple(outs),
        terms=list(design.columns),
        coef=pd.DataFrame(Bo, index=design.columns, columns=outs),
        cov=cov,
        sigma_alpha_sq=pd.Series(a_o, index=outs, name="sigma_alpha_sq"),
        Sigma=pd.DataFrame(Sigma_o, index=outs, columns=outs),
        loglik=float(loglik),
        converged=bool(converged),
        ridge=ridge,
        iterations=iterations,
        message=message,
        theta=theta,
        design=design,
        optim=optim,
        inv_hessian=inv_h,
    )


# --------------------------------------------------------------------------------------
# DID coefficients


@dataclass
class DidCoefficients:
    """
    TREATED x YEAR rows (and level x TREATED x YEAR rows for extended schemes).

    ``table`` has columns term, outcome, estimate and, once inference has
    run, se, p and stars.
    """

    scheme: InteractionScheme
    table: pd.DataFrame

    def estimate(self, term: str, outcome: str) -> float:
        row = self.table[(self.table["term"] == term) & (self.table["outcome"] == outcome)]
        if row.empty:
            raise KeyError((term, outcome))
        return float(row["estimate"].iloc[0])

    @property
    def terms(self) -> list:
        return list(dict.fromkeys(self.table["term"]))

    def wide(self, value="estimate") -> pd.DataFrame:
        return self.table.pivot(index="term", columns="outcome", values=value).loc[
            self.terms, [o for o in OUTCOMES if o in set(self.table["outcome"])]]


def did_terms(fit: MultivariateMixedFit, include_tau: bool = True) -> list:
    """Names of the DID terms of a fit, in design order."""
    delta = [t for t in fit.terms if t.startswith("TREATED:YEAR_")]
    tau = [t for t in fit.terms if ":TREATED:YEAR_" in t] if include_tau else []
    return delta + tau


def extract_did_coefficients(fit: MultivariateMixedFit, tau: Optional[bool] = None,
                             boot=None) -> DidCoefficients:
    """
    Pull the DID rows out of a fit.

    Parameters
    ----------
    tau : bool, optional
        Include level-specific (tau) rows. Defaults to True for extended
        schemes; requesting them from a base-scheme fit raises
        :class:`SchemeMismatchError`.
    boot : BootstrapResult, optional
        Adds bootstrap se, p and significance stars.
    """
    scheme = fit.scheme
    if tau is None:
        tau = scheme.kind is not SchemeKind.BASE
    elif tau and scheme.kind is SchemeKind.BASE:
        raise SchemeMismatchError("tau coefficients requested from a base-scheme fit")
    terms = did_terms(fit, include_tau=tau)
    rows = []
    for o in fit.outcomes:
        for t in terms:
            rows.append({"term": t, "outcome": o, "estimate": float(fit.coef.loc[t, o])})
    table = pd.DataFrame(rows, columns=["term", "outcome", "estimate"])
    if boot is not None:
        from .inference import stars
        if boot.scheme != scheme:
            raise SchemeMismatchError(
                f"bootstrap scheme {boot.scheme.name!r} differs from fit scheme {scheme.name!r}")
        bt = boot.table.set_index(["term", "outcome"])
        keys = list(zip(table["term"], table["outcome"]))
        table["se"] = bt.loc[keys, "se"].to_numpy()
        table["p"] = bt.loc[keys, "p"].to_numpy()
        table["stars"] = [stars(p) for p in table["p"]]
    return DidCoefficients(scheme, table)


def export_coefficients(fit: MultivariateMixedFit, path, boot=None) -> pd.DataFrame:
    """Write the full coefficient table in the terms x outcomes layout."""
    from .inference import coefficient_table
    table = coefficient_table(fit, boot)
    table.to_csv(path, index=False, lineterminator="\n")
    return table
