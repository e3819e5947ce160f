"""
Cluster bootstrap for the DID coefficients and the Wilks' lambda joint test
of parallel pre-trends.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from scipy import stats

from .core import StudyConfig
from .did import (DidDesign, InteractionScheme, MultivariateMixedFit, SchemeKind, build_design,
                  fit_multivariate_mixed)
from .exceptions import ConfigError, P4PError, RankError, SchemeMismatchError
from .riskadjust import PanelDataset

logger = logging.getLogger(__name__)

MIN_REPLICATES = 100
MAX_FAILED_SHARE = 0.10


def stars(p) -> str:
    """Significance code: ``***`` p<0.01, ``**`` p<0.05, ``*`` p<0.1."""
    if p is None or not np.isfinite(p):
        return ""
    if p < 0.01:
        return "***"
    if p < 0.05:
        return "**"
    if p < 0.1:
        return "*"
    return ""


@dataclass
class BootstrapResult:
    """
    Hospital-level cases bootstrap of every fixed effect.

    ``table`` has one row per (term, outcome) with the full-sample estimate,
    bootstrap se, two-sided normal p-value and 95% percentile interval.
    ``replicates`` holds the replicate estimates (B x rows of ``table``),
    NaN for failed replicates.
    """

    scheme: InteractionScheme
    table: pd.DataFrame
    replicates: np.ndarray = field(repr=False)
    B: int = 0
    seed: int = 0
    n_failed: int = 0

    @property
    def valid(self) -> bool:
        return self.n_failed <= MAX_FAILED_SHARE * self.B

    def row(self, term: str, outcome: str) -> pd.Series:
        t = self.table
        sel = t[(t["term"] == term) & (t["outcome"] == outcome)]
        if sel.empty:
            raise KeyError((term, outcome))
        return sel.iloc[0]

    def to_csv(self, path) -> None:
        cols = ["term", "outcome", "estimate", "se", "p", "ci_low", "ci_high"]
        self.table[cols].to_csv(path, index=False, lineterminator="\n")


def _normal_p(est, se):
    est = np.asarray(est, dtype=float)
    se = np.asarray(se, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.abs(est) / se
        p = 2.0 * stats.norm.sf(z)
    # zero resampling variance: any non-zero estimate is certain, zero is not
    p = np.where(se > 0, p, np.where(est == 0, 1.0, 0.0))
    return np.clip(p, 0.0, 1.0)


def resample_indices(n_hospitals: int, B: int, seed: int) -> np.ndarray:
    """Pre-drawn hospital indices, one row per replicate."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, n_hospitals, size=(B, n_hospitals))


def _replicate_estimates(design, base_fit, idx_rows, fit_kwargs):
    H = design.n_hospitals
    out = np.full((len(idx_rows), len(base_fit.terms) * len(base_fit.outcomes)), np.nan)
    for r, idx in enumerate(idx_rows):
        counts = np.bincount(idx, minlength=H).astype(float)
        try:
            fit = fit_multivariate_mixed(design, start=base_fit, cluster_weights=counts, **fit_kwargs)
        except (P4PError, ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
            logger.debug("bootstrap replicate failed: %s", exc)
            continue
        if not fit.converged:
            continue
        out[r] = fit.coef.to_numpy().T.ravel()
    return out


def _worker(args):
    design, base_fit, idx_rows, fit_kwargs = args
    return _replicate_estimates(design, base_fit, idx_rows, fit_kwargs)


def cluster_bootstrap(panel, scheme="base", B: int = 200, seed: int = 0,
                      config: Optional[StudyConfig] = None, workers: int = 1,
                      fit: Optional[MultivariateMixedFit] = None, **fit_kwargs) -> BootstrapResult:
    """
    Resample hospitals with replacement and refit the multivariate model.

    Parameters
    ----------
    panel : PanelDataset or DidDesign
        A prepared design skips the design step.
    B : int
        Replicates; at least 100.
    seed : int
        Seeds the pre-drawn resampling index sets, so the result does not
        depend on ``workers``.
    fit : MultivariateMixedFit, optional
        Full-sample fit to reuse for point estimates and warm starts.
    **fit_kwargs
        Passed to :func:`fit_multivariate_mixed`.

    Notes
    -----
    A hospital drawn ``m`` times enters the replicate likelihood with
    multiplicity ``m``, which is the same as relabelling its copies as
    distinct clusters. Replicates that fail or do not converge are dropped
    and counted in ``n_failed``.
    """
    if B < MIN_REPLICATES:
        raise ConfigError(f"bootstrap needs B >= {MIN_REPLICATES}, got {B}")
    if isinstance(panel, DidDesign):
        design = panel
    else:
        design = build_design(panel, scheme, config=config)
    if fit is None:
        fit = fit_multivariate_mixed(design, curvature=True, **fit_kwargs)
    elif fit.inv_hessian is None and fit.theta is not None:
        # one Hessian at the full-sample optimum speeds up every replicate
        fit = fit_multivariate_mixed(design, start=fit, curvature=True, **fit_kwargs)
    idx = resample_indices(design.n_hospitals, B, seed)
    # keep replicate fits light: the design's cached statistics travel with it
    if workers > 1:
        chunks = np.array_split(np.arange(B), workers)
        fit_light = _strip(fit)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_worker, [(design, fit_light, idx[ch], fit_kwargs)
                                            for ch in chunks]))
        reps = np.vstack(parts)
    else:
        reps = _replicate_estimates(design, fit, idx, fit_kwargs)

    ok = np.all(np.isfinite(reps), axis=1)
    n_failed = int(B - ok.sum())
    good = reps[ok]
    est = fit.coef.to_numpy().T.ravel()
    if good.shape[0] >= 2:
        se = good.std(axis=0, ddof=1)
        lo, hi = np.percentile(good, [2.5, 97.5], axis=0)
    else:
        se = np.full(est.shape, np.nan)
        lo = hi = np.full(est.shape, np.nan)
    # spread below round-off is no spread at all
    se = np.where(se <= 1e-12 * np.maximum(np.abs(est), 1.0), 0.0, se)
    p = _normal_p(est, se)
    terms = list(fit.terms)
    outcomes = list(fit.outcomes)
    table = pd.DataFrame({
        "term": terms * len(outcomes),
        "outcome": np.repeat(outcomes, len(terms)),
        "estimate": est,
        "se": se,
        "p": p,
        "ci_low": lo,
        "ci_high": hi,
    })
    result = BootstrapResult(design.scheme, table, reps, B=B, seed=seed, n_failed=n_failed)
    if not result.valid:
        logger.warning("bootstrap invalid: %d of %d replicates failed", n_failed, B)
    return result


def _strip(fit: MultivariateMixedFit) -> MultivariateMixedFit:
    from dataclasses import replace
    return replace(fit, design=None, optim=None)


@dataclass
class JointTestResult:
    """Wilks' lambda with its Rao F approximation (exact for one hypothesis column)."""

    lam: float
    stat: float
    df1: float
    df2: float
    p: float
    term: str = ""
    n: int = 0

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "stat": self.stat, "df1": self.df1, "df2": self.df2,
                "p": self.p}


def rao_f(lam: float, p: int, q: int, nu_e: float):
    """Rao's F transformation of Wilks' lambda for p responses and q hypothesis df."""
    if p * p + q * q - 5 > 0:
        t = np.sqrt((p * p * q * q - 4.0) / (p * p + q * q - 5.0))
    else:
        t = 1.0
    w = nu_e + q - (p + q + 1) / 2.0
    df1 = p * q
    df2 = w * t - (p * q - 2) / 2.0
    root = lam ** (1.0 / t)
    F = (1.0 - root) / root * df2 / df1
    pval = float(stats.f.sf(F, df1, df2))
    return float(F), float(df1), float(df2), min(max(pval, 0.0), 1.0)


def _demean(M, groups, n_groups):
    counts = np.bincount(groups, minlength=n_groups).astype(float)
    sums = np.column_stack([np.bincount(groups, weights=M[:, j], minlength=n_groups)
                            for j in range(M.shape[1])])
    return M - (sums / counts[:, None])[groups]


def _residualize(Y, Z):
    if Z.shape[1] == 0:
        return Y
    coef, *_ = np.linalg.lstsq(Z, Y, rcond=None)
    return Y - Z @ coef


def _independent_columns(Z, rtol=1e-10):
    if Z.shape[1] == 0:
        return Z
    from scipy.linalg import qr
    norms = np.linalg.norm(Z, axis=0)
    keep = norms > rtol * max(norms.max(), 1e-300)
    Z = Z[:, keep]
    if Z.shape[1] == 0:
        return Z
    _, R, piv = qr(Z / np.linalg.norm(Z, axis=0), mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > rtol * d[0]))
    return Z[:, np.sort(piv[:rank])]


def wilks_parallel_trend_test(panel, scheme="base", config: Optional[StudyConfig] = None,
                              term: Optional[str] = None) -> JointTestResult:
    """
    Joint test that the first post-reference TREATED x YEAR effect is zero
    for every outcome.

    Cells with every outcome observed are used. Hospital intercepts are
    absorbed by within-hospital demeaning; both the responses and the tested
    column are then residualised on the remaining fixed effects, giving the
    error and hypothesis cross-products ``E`` and ``H``.

    Raises
    ------
    SchemeMismatchError
        Scheme other than ``base``.
    RankError
        ``E`` is singular; dropping a (near-)duplicate outcome usually helps.
    """
    scheme = InteractionScheme.coerce(scheme)
    if scheme.kind is not SchemeKind.BASE:
        raise SchemeMismatchError("the parallel-trend test is defined for the base scheme")
    design = panel if isinstance(panel, DidDesign) else build_design(panel, scheme, config=config)
    if term is None:
        pre = [y for y in design.years_nonref
               if config is None or y in config.pre_years]
        if not pre:
            raise SchemeMismatchError("no pre-policy year besides the reference year")
        term = f"TREATED:YEAR_{pre[0]}"
    if term not in design.columns:
        raise SchemeMismatchError(f"term {term!r} not in the design")

    complete = np.all(~np.isnan(design.Y), axis=1)
    Y = design.Y[complete]
    X = design.X[complete]
    groups_raw = design.groups[complete]
    _, groups = np.unique(groups_raw, return_inverse=True)
    n_groups = int(groups.max()) + 1
    n, K = Y.shape

    j = design.columns.index(term)
    Yd = _demean(Y, groups, n_groups)
    Xd = _demean(X, groups, n_groups)
    x = Xd[:, [j]]
    Z = _independent_columns(np.delete(Xd, j, axis=1))
    Ry = _residualize(Yd, Z)
    rx = _residualize(x, Z)
    sxx = float(rx[:, 0] @ rx[:, 0])
    if sxx <= 1e-12 * max(float(x[:, 0] @ x[:, 0]), 1e-300):
        raise RankError(f"{term} is collinear with the other effects on complete cells")
    sxy = rx[:, 0] @ Ry
    Hm = np.outer(sxy, sxy) / sxx
    Em = Ry.T @ Ry - Hm
    Em = 0.5 * (Em + Em.T)
    nu_e = n - n_groups - Z.shape[1] - 1
    if nu_e < K:
        raise RankError(f"only {nu_e} residual degrees of freedom for {K} outcomes")
    sign_e, logdet_e = np.linalg.slogdet(Em)
    scale = np.max(np.abs(np.diag(Em)))
    if sign_e <= 0 or np.min(np.linalg.eigvalsh(Em)) <= 1e-12 * scale:
        raise RankError("residual cross-product matrix is singular; "
                        "remove a linearly dependent outcome")
    sign_t, logdet_t = np.linalg.slogdet(Em + Hm)
    lam = float(np.exp(logdet_e - logdet_t))
    lam = min(lam, 1.0)
    F, df1, df2, p = rao_f(lam, K, 1, nu_e)
    return JointTestResult(lam=lam, stat=F, df1=df1, df2=df2, p=p, term=term, n=n)


def coefficient_table(fit: MultivariateMixedFit, boot: Optional[BootstrapResult] = None,
                      digits: int = 6) -> pd.DataFrame:
    """
    Terms x outcomes table: estimates with significance stars and a bracketed
    standard error column per outcome.

    Without ``boot`` the model-based standard errors are shown and no stars
    are attached.
    """
    if boot is not None and boot.scheme != fit.scheme:
        raise SchemeMismatchError(
            f"bootstrap scheme {boot.scheme.name!r} differs from fit scheme {fit.scheme.name!r}")
    if boot is not None:
        bt = boot.table.set_index(["term", "outcome"])
    else:
        model_se = fit.se()
    rows = []
    for term in fit.terms:
        row = {"term": term}
        for o in fit.outcomes:
            est = float(fit.coef.loc[term, o])
            if boot is not None:
                se = float(bt.loc[(term, o), "se"])
                code = stars(float(bt.loc[(term, o), "p"]))
            else:
                se = float(model_se.loc[term, o])
                code = ""
            row[o] = f"{est:.{digits}f}{code}"
            row[f"{o}_se"] = f"[{se:.{digits}f}]"
        rows.append(row)
    return pd.DataFrame(rows)
