"""
Marginal effects by year and group, DID reductions and savings counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .did import DidDesign, MultivariateMixedFit, design_row
from .exceptions import ValidationError


@dataclass
class MarginalEffectsTable:
    """
    Predicted outcome (percent) per outcome x year x group, and per level
    for extended schemes.

    ``table`` columns: outcome, year, group, level, predicted_pct. ``level``
    is empty for the base scheme.
    """

    table: pd.DataFrame

    def differences(self) -> pd.DataFrame:
        """Treated minus control per outcome, level and year (percentage points)."""
        t = self.table
        wide = t.pivot_table(index=["outcome", "level", "year"], columns="group",
                             values="predicted_pct", sort=False)
        out = (wide["treated"] - wide["control"]).rename("diff_pct").reset_index()
        return out

    def to_csv(self, path) -> None:
        cols = ["outcome", "year", "group", "level", "predicted_pct"]
        self.table[cols].to_csv(path, index=False, lineterminator="\n")

    @classmethod
    def from_differences(cls, diffs: Mapping[str, Mapping[int, float]],
                         control_pct: float = 0.0) -> "MarginalEffectsTable":
        """
        Build a table from displayed treated-minus-control gaps.

        Useful for reproducing reported arithmetic: the control prediction
        is set to ``control_pct`` and the treated one to control plus gap.
        """
        rows = []
        for outcome, by_year in diffs.items():
            for year, d in by_year.items():
                rows.append({"outcome": outcome, "year": int(year), "group": "control",
                             "level": "", "predicted_pct": control_pct})
                rows.append({"outcome": outcome, "year": int(year), "group": "treated",
                             "level": "", "predicted_pct": control_pct + d})
        return cls(pd.DataFrame(rows))


def marginal_effects(fit: MultivariateMixedFit, design: Optional[DidDesign] = None
                     ) -> MarginalEffectsTable:
    """
    Population-level predictions with hospital effects at zero.

    MONTH is set to the mean month index of the year, so each yearly point
    carries the secular trend. Values are in percent.
    """
    design = design if design is not None else fit.design
    if design is None:
        raise ValueError("a design is required to locate years and levels")
    scheme = design.scheme
    years_nonref = design.years_nonref
    labels = scheme.level_labels or {"": None}
    B = fit.coef.loc[design.columns]
    rows = []
    for outcome in fit.outcomes:
        beta = B[outcome].to_numpy()
        for level, indicator in labels.items():
            levels = {indicator: 1.0} if indicator else {}
            for year in design.years:
                month = 12 * (year - design.first_year) + 6.5
                for group, tr in (("control", 0.0), ("treated", 1.0)):
                    x = design_row(scheme, years_nonref, tr, year, month, levels,
                                   include_month=design.include_month)
                    rows.append({"outcome": outcome, "year": int(year), "group": group,
                                 "level": level, "predicted_pct": 100.0 * float(x @ beta)})
    return MarginalEffectsTable(pd.DataFrame(rows))


@dataclass
class DidSummary:
    """
    Per outcome (and level): yearly treated-control gaps, the first-post-year
    reduction relative to the last pre year, and incremental reductions for
    later post years. All in percentage points, signed.
    """

    table: pd.DataFrame
    baseline_year: int
    post_years: tuple

    def reduction(self, outcome: str, year: int, level: str = "") -> float:
        t = self.table
        sel = t[(t["outcome"] == outcome) & (t["level"] == level)]
        if sel.empty:
            raise KeyError(outcome)
        return float(sel[_reduction_column(year, self.post_years)].iloc[0])

    def to_csv(self, path) -> None:
        self.table.to_csv(path, index=False, lineterminator="\n")


def _reduction_column(year, post_years):
    return f"reduction_{year}" if year == post_years[0] else f"incremental_{year}"


def did_reduction(table: MarginalEffectsTable, baseline_year: int = 2011,
                  post_years: Optional[Sequence[int]] = None) -> DidSummary:
    """
    Signed DID reductions from yearly group gaps.

    ``reduction_<first post>`` = gap(baseline) - gap(first post);
    ``incremental_<later>`` = gap(previous year) - gap(year). A positive
    value means the treated-minus-control gap shrank.

    Raises
    ------
    ValidationError
        The baseline year is missing from the table.
    """
    diffs = table.differences()
    years = sorted(diffs["year"].unique())
    if baseline_year not in years:
        raise ValidationError(f"marginal effects table has no {baseline_year} row")
    if post_years is None:
        post_years = [y for y in years if y > baseline_year]
    post_years = tuple(sorted(post_years))
    if not post_years:
        raise ValidationError(f"no post year after {baseline_year}")
    missing = [y for y in post_years if y not in years]
    if missing:
        raise ValidationError(f"marginal effects table lacks years {missing}")
    rows = []
    for (outcome, level), grp in diffs.groupby(["outcome", "level"], sort=False):
        gap = dict(zip(grp["year"], grp["diff_pct"]))
        row = {"outcome": outcome, "level": level}
        for y in years:
            row[f"diff_{y}"] = gap[y]
        prev = baseline_year
        for y in post_years:
            row[_reduction_column(y, post_years)] = gap[prev] - gap[y]
            prev = y
        rows.append(row)
    return DidSummary(pd.DataFrame(rows), baseline_year, post_years)


def savings_count(summary: DidSummary, treated_volume) -> pd.DataFrame:
    """
    Admissions saved (or in excess) implied by each DID reduction.

    ``savings = round(|reduction| / 100 * volume)``, half rounded up.

    Parameters
    ----------
    treated_volume : mapping
        Either year -> admissions of treated wards, or
        outcome -> (year -> admissions).

    Returns
    -------
    DataFrame with outcome, level, year, reduction_pct, volume, savings and
    direction (``saved`` when the gap shrank, ``excess`` when it grew).
    """
    rows = []
    for _, r in summary.table.iterrows():
        outcome = r["outcome"]
        vols = treated_volume.get(outcome, treated_volume) \
            if isinstance(treated_volume, Mapping) else treated_volume
        for y in summary.post_years:
            if y not in vols:
                continue
            vol = vols[y]
            if vol <= 0:
                raise ValidationError(f"treated volume for {y} must be positive")
            red = float(r[_reduction_column(y, summary.post_years)])
            count = int(np.floor(abs(red) / 100.0 * vol + 0.5))
            direction = "none" if count == 0 else ("saved" if red > 0 else "excess")
            rows.append({"outcome": outcome, "level": r["level"], "year": int(y),
                         "reduction_pct": red, "volume": vol, "savings": count,
                         "direction": direction})
    return pd.DataFrame(rows, columns=["outcome", "level", "year", "reduction_pct", "volume",
                                       "savings", "direction"])
