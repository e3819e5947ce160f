"""
Admission records, study configuration, CSV ingestion and descriptive summaries.

The dataset is held column-wise in a :class:`pandas.DataFrame`; individual
:class:`AdmissionRecord` objects are materialised on demand only.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import pandas as pd

from .exceptions import ConfigError, SchemaError, ValidationError

logger = logging.getLogger(__name__)

OUTCOMES = ("mortality", "readmissions", "return_or", "transfers", "voldisch")
PATIENT_COVARIATES = ("gender", "age", "intcare", "drg_weight", "comorbidity")
WARD_COVARIATES = ("technology", "teaching", "specialised")
WARD_ATTRIBUTES = ("technology", "teaching", "specialised", "surgical", "ownership", "treated")

COLUMNS = (
    "hospital_id", "ward_id", "year", "month",
    "gender", "age", "intcare", "drg_weight", "comorbidity",
    "technology", "teaching", "specialised", "surgical", "ownership", "treated",
    "mortality", "readmissions", "return_or", "transfers", "voldisch",
)

_INTEGER = ("year", "month", "intcare", "comorbidity")
_REAL = ("age", "drg_weight")
_BINARY = ("gender", "technology", "teaching", "specialised", "surgical", "treated",
           "mortality", "readmissions", "transfers", "voldisch")
_NON_NEGATIVE = ("age", "intcare", "drg_weight", "comorbidity")


class Ownership(str, Enum):
    PUBLIC = "PUBLIC"
    PROFIT = "PROFIT"
    NOPROFIT = "NOPROFIT"


@dataclass(frozen=True)
class AdmissionRecord:
    """One patient discharge."""

    hospital_id: str
    ward_id: str
    year: int
    month: int
    gender: int
    age: float
    intcare: int
    drg_weight: float
    comorbidity: int
    technology: int
    teaching: int
    specialised: int
    surgical: int
    ownership: Ownership
    treated: int
    mortality: int
    readmissions: int
    return_or: Optional[int]
    transfers: int
    voldisch: int


@dataclass(frozen=True)
class StudyConfig:
    """Study window, outcome set and numerical settings for a pipeline run."""

    pre_years: tuple = (2010, 2011)
    post_years: tuple = (2012, 2013)
    reference_year: int = 2010
    outcomes: tuple = OUTCOMES
    bootstrap_replicates: int = 200
    seed: int = 0
    glmm_tol: float = 1e-3
    mvmm_tol: float = 1e-4
    max_iter: int = 500
    ward_covariates: bool = False
    weighted: bool = False

    def __post_init__(self):
        object.__setattr__(self, "pre_years", tuple(int(y) for y in self.pre_years))
        object.__setattr__(self, "post_years", tuple(int(y) for y in self.post_years))
        object.__setattr__(self, "outcomes", tuple(self.outcomes))
        if not self.pre_years or not self.post_years:
            raise ConfigError("pre_years and post_years must be non-empty")
        if set(self.pre_years) & set(self.post_years):
            raise ConfigError("pre_years and post_years overlap")
        if self.reference_year not in self.pre_years:
            raise ConfigError(f"reference_year {self.reference_year} not in pre_years")
        unknown = set(self.outcomes) - set(OUTCOMES)
        if unknown or not self.outcomes:
            raise ConfigError(f"unknown outcomes {sorted(unknown)}")
        if self.bootstrap_replicates < 0:
            raise ConfigError("bootstrap_replicates must be non-negative")

    @property
    def years(self) -> tuple:
        return tuple(sorted(self.pre_years + self.post_years))

    @property
    def first_year(self) -> int:
        return self.years[0]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("pre_years", "post_years", "outcomes"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "StudyConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid config JSON: {exc}") from exc
        return cls.from_dict(d)


def _location(pos, line_offset):
    # line_offset=None means an in-memory frame: report the row position instead
    return None if line_offset is None else int(pos) + line_offset


class AdmissionDataset:
    """
    Validated, immutable collection of admission records.

    Parameters
    ----------
    frame : pandas.DataFrame
        Typed columns as in ``COLUMNS``. ``return_or`` is float with NaN for
        medical wards; ``ownership`` holds the CSV codes.
    config : StudyConfig, optional
        When given, years are checked against the study window.
    """

    def __init__(self, frame: pd.DataFrame, config: Optional[StudyConfig] = None,
                 validate: bool = True, _line_offset=None):
        frame = frame.loc[:, list(COLUMNS)].reset_index(drop=True)
        if validate:
            _check_invariants(frame, config, _line_offset)
        self._frame = frame
        self.config = config

    @property
    def frame(self) -> pd.DataFrame:
        """A copy of the underlying columns."""
        return self._frame.copy()

    def column(self, name) -> np.ndarray:
        return self._frame[name].to_numpy(copy=True)

    def __len__(self):
        return len(self._frame)

    def __iter__(self) -> Iterator[AdmissionRecord]:
        return self.records()

    def records(self) -> Iterator[AdmissionRecord]:
        for row in self._frame.itertuples(index=False):
            d = row._asdict()
            d["ownership"] = Ownership(d["ownership"])
            d["return_or"] = None if pd.isna(d["return_or"]) else int(d["return_or"])
            for k in _INTEGER + _BINARY:
                d[k] = int(d[k])
            d["age"] = float(d["age"])
            d["drg_weight"] = float(d["drg_weight"])
            yield AdmissionRecord(**d)

    @cached_property
    def index(self) -> dict:
        """Mapping hospital -> ward -> array of record positions."""
        out = {}
        groups = self._frame.groupby(["hospital_id", "ward_id"], sort=True).indices
        for (h, w), pos in groups.items():
            out.setdefault(h, {})[w] = pos
        return out

    @property
    def years(self) -> tuple:
        if self.config is not None:
            return self.config.years
        return tuple(sorted(self._frame["year"].unique().tolist()))

    def subset(self, mask) -> "AdmissionDataset":
        mask = np.asarray(mask, dtype=bool)
        sub = self._frame.loc[mask]
        return AdmissionDataset(sub, self.config, validate=False)

    @classmethod
    def from_records(cls, records: Sequence[AdmissionRecord],
                     config: Optional[StudyConfig] = None) -> "AdmissionDataset":
        rows = []
        for r in records:
            d = asdict(r)
            d["ownership"] = Ownership(d["ownership"]).value
            d["return_or"] = np.nan if d["return_or"] is None else float(d["return_or"])
            rows.append(d)
        frame = pd.DataFrame(rows, columns=list(COLUMNS))
        return cls(_coerce_types(frame), config)

    @classmethod
    def concat(cls, datasets: Sequence["AdmissionDataset"]) -> "AdmissionDataset":
        frame = pd.concat([d._frame for d in datasets], ignore_index=True)
        return cls(frame, datasets[0].config)


def _coerce_types(frame: pd.DataFrame) -> pd.DataFrame:
    frame = frame.copy()
    frame["hospital_id"] = frame["hospital_id"].astype(str)
    frame["ward_id"] = frame["ward_id"].astype(str)
    for c in _INTEGER + _BINARY:
        frame[c] = frame[c].astype(np.int64)
    for c in _REAL:
        frame[c] = frame[c].astype(np.float64)
    frame["return_or"] = frame["return_or"].astype(np.float64)
    frame["ownership"] = frame["ownership"].map(lambda v: Ownership(v).value)
    return frame


def _first_bad(mask, line_offset, column, message, exc=ValidationError):
    bad = np.flatnonzero(np.asarray(mask))
    if bad.size:
        pos = bad[0]
        line = _location(pos, line_offset)
        if line is None:
            message = f"{message} (row {pos})"
        raise exc(message, line=line, column=column)


def _check_invariants(frame, config, line_offset):
    if len(frame) == 0:
        raise ValidationError("dataset is empty")
    _first_bad(frame["hospital_id"].astype(str).str.len() == 0, line_offset,
               "hospital_id", "empty identifier")
    _first_bad(frame["ward_id"].astype(str).str.len() == 0, line_offset,
               "ward_id", "empty identifier")
    for c in _BINARY:
        _first_bad(~frame[c].isin((0, 1)), line_offset, c, "binary field must be 0 or 1")
    for c in _NON_NEGATIVE:
        v = frame[c].to_numpy(dtype=float)
        _first_bad(~np.isfinite(v) | (v < 0), line_offset, c, "value must be finite and non-negative")
    _first_bad(~frame["month"].between(1, 12), line_offset, "month", "month outside 1..12")
    if config is not None:
        _first_bad(~frame["year"].isin(config.years), line_offset, "year",
                   f"year outside study window {config.years}")
    _first_bad(~frame["ownership"].isin([o.value for o in Ownership]), line_offset,
               "ownership", "ownership must be PUBLIC, PROFIT or NOPROFIT")

    ret = frame["return_or"].to_numpy(dtype=float)
    surgical = frame["surgical"].to_numpy()
    present = ~np.isnan(ret)
    _first_bad(present & (surgical == 0), line_offset, "return_or",
               "return_or defined only for surgical wards")
    _first_bad(~present & (surgical == 1), line_offset, "return_or",
               "return_or missing for a surgical ward")
    _first_bad(present & ~np.isin(ret, (0.0, 1.0)), line_offset, "return_or",
               "binary field must be 0 or 1")

    grouped = frame.groupby(["hospital_id", "ward_id"], sort=True)
    nunique = grouped[list(WARD_ATTRIBUTES)].nunique()
    bad = nunique[(nunique > 1).any(axis=1)]
    if len(bad):
        (h, w) = bad.index[0]
        attr = [a for a in WARD_ATTRIBUTES if bad.iloc[0][a] > 1][0]
        raise ValidationError(
            f"ward attribute not constant: {attr!r} varies for hospital {h!r}, ward {w!r}",
            column=attr)


_INT_RE = r"^[+-]?\d+$"


def load_admissions(path, config: Optional[StudyConfig] = None) -> AdmissionDataset:
    """
    Read and validate an admissions CSV.

    Raises
    ------
    FileNotFoundError
        When ``path`` does not exist.
    SchemaError
        Wrong header or a field that does not parse; carries line and column.
    ValidationError
        Domain invariant violated (return_or on a medical ward, ward
        attributes varying across rows, year outside the study window).
    """
    path = Path(path)
    raw = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False,
                      encoding="utf-8")
    header = list(raw.columns)
    missing = [c for c in COLUMNS if c not in header]
    extra = [c for c in header if c not in COLUMNS]
    if missing or extra:
        raise SchemaError(f"header mismatch: missing {missing}, unexpected {extra}", line=1)
    if len(raw) == 0:
        raise SchemaError("no data rows", line=2)

    off = 2  # header occupies line 1
    parsed = {}
    for c in ("hospital_id", "ward_id"):
        parsed[c] = raw[c]
    for c in _INTEGER + _BINARY:
        s = raw[c].str.strip()
        _first_bad(~s.str.match(_INT_RE), off, c, "expected an integer", SchemaError)
        parsed[c] = s.astype(np.int64)
    for c in _REAL:
        v = pd.to_numeric(raw[c].str.strip(), errors="coerce")
        _first_bad(v.isna() | ~np.isfinite(v), off, c, "expected a finite number", SchemaError)
        parsed[c] = v.astype(np.float64)
    own = raw["ownership"].str.strip()
    _first_bad(~own.isin([o.value for o in Ownership]), off, "ownership",
               "ownership must be PUBLIC, PROFIT or NOPROFIT", SchemaError)
    parsed["ownership"] = own
    ret = raw["return_or"].str.strip()
    _first_bad(~ret.isin(("", "0", "1")), off, "return_or",
               "return_or must be 0, 1 or empty", SchemaError)
    parsed["return_or"] = ret.replace("", np.nan).astype(np.float64)

    frame = pd.DataFrame({c: parsed[c] for c in COLUMNS})
    ds = AdmissionDataset(frame, config, _line_offset=off)
    logger.info("loaded %d admissions from %s", len(ds), path)
    return ds


def write_admissions(ds: AdmissionDataset, path) -> None:
    """Serialise a dataset to the input CSV schema (round-trips through load)."""
    frame = ds.frame
    ret = frame["return_or"]
    frame["return_or"] = ret.map(lambda v: "" if np.isnan(v) else str(int(v)))
    frame.to_csv(path, index=False, float_format=None, lineterminator="\n")


# descriptive-summary variables: name -> (source column, transform)
SUMMARY_VARIABLES = (
    "gender", "age", "intcare", "drg_weight", "comorbidity",
    "technology", "teaching", "specialised", "surgical",
    "own_noprofit", "own_profit", "own_public", "treated",
    "transfers", "return_or", "mortality", "readmissions", "voldisch",
)
BINARY_SUMMARY = tuple(v for v in SUMMARY_VARIABLES if v not in ("age", "intcare", "drg_weight", "comorbidity"))


def _summary_columns(frame):
    own = frame["ownership"]
    cols = {c: frame[c].astype(float) for c in SUMMARY_VARIABLES
            if not c.startswith("own_")}
    cols["own_noprofit"] = (own == Ownership.NOPROFIT.value).astype(float)
    cols["own_profit"] = (own == Ownership.PROFIT.value).astype(float)
    cols["own_public"] = (own == Ownership.PUBLIC.value).astype(float)
    return pd.DataFrame(cols)[list(SUMMARY_VARIABLES)]


@dataclass
class SummaryTable:
    """
    Per-variable, per-year count, mean and population standard deviation.

    ``data`` is indexed by ``(variable, year)`` with columns ``n``, ``mean``
    and ``sd``. ``n`` counts non-missing values (return_or counts surgical
    records only).
    """

    data: pd.DataFrame = field(repr=False)

    def mean(self, variable, year) -> float:
        return float(self.data.loc[(variable, year), "mean"])

    def sd(self, variable, year) -> float:
        return float(self.data.loc[(variable, year), "sd"])

    @property
    def years(self):
        return sorted(self.data.index.get_level_values("year").unique())

    def wide(self) -> pd.DataFrame:
        """Wide layout with one row per variable, mean and sd columns per year."""
        w = self.data[["mean", "sd"]].unstack("year")
        w = w.reindex(SUMMARY_VARIABLES)
        w.columns = [f"{stat}_{year}" for stat, year in w.columns]
        order = [f"{s}_{y}" for y in self.years for s in ("mean", "sd")]
        return w[order]

    def pool(self, other: "SummaryTable") -> "SummaryTable":
        """Combine summaries of two disjoint datasets by count-weighted moments."""
        a, b = self.data.align(other.data, join="outer")
        a = a.fillna({"n": 0, "mean": 0.0, "sd": 0.0})
        b = b.fillna({"n": 0, "mean": 0.0, "sd": 0.0})
        n = a["n"] + b["n"]
        wa = np.where(n > 0, a["n"] / n.where(n > 0, 1), 0.0)
        wb = 1.0 - wa
        mean = wa * a["mean"] + wb * b["mean"]
        var = wa * a["sd"] ** 2 + wb * b["sd"] ** 2 + wa * wb * (a["mean"] - b["mean"]) ** 2
        out = pd.DataFrame({"n": n.astype(np.int64), "mean": mean, "sd": np.sqrt(var)},
                           index=a.index)
        return SummaryTable(out.sort_index())

    def to_csv(self, path) -> None:
        self.wide().to_csv(path, index_label="variable", lineterminator="\n")


def summarize(ds: AdmissionDataset) -> SummaryTable:
    """Per-year means and population standard deviations of the descriptive variables."""
    frame = ds._frame
    cols = _summary_columns(frame)
    cols["year"] = frame["year"].to_numpy()
    g = cols.groupby("year", sort=True)
    n = g.count().stack()
    mean = g.mean().stack()
    sd = g.std(ddof=0).stack()
    out = pd.DataFrame({"n": n, "mean": mean, "sd": sd})
    out.index = out.index.set_names(["year", "variable"])
    out = out.reorder_levels(["variable", "year"]).sort_index()
    out["n"] = out["n"].astype(np.int64)
    out["sd"] = out["sd"].fillna(0.0).clip(lower=0.0)
    return SummaryTable(out)


@dataclass
class DidAssumptionReport:
    """Outcome of :func:`validate_did_assumptions`."""

    switching_wards: list
    attrition: dict
    group_counts: dict

    @property
    def ok(self) -> bool:
        return not self.switching_wards

    def to_dict(self) -> dict:
        return {
            "switching_wards": [list(w) for w in self.switching_wards],
            "attrition": [{"hospital_id": h, "ward_id": w, "missing_years": ys}
                          for (h, w), ys in self.attrition.items()],
            "group_counts": {str(y): c for y, c in self.group_counts.items()},
        }


def validate_did_assumptions(ds: AdmissionDataset, years: Optional[Sequence[int]] = None
                             ) -> DidAssumptionReport:
    """
    Check the structural DID assumptions on a dataset.

    Lists wards whose treatment flag changes (must be none), wards absent in
    some study years (attrition, reported but not fatal) and counts treated
    and control wards per year.

    Raises
    ------
    ValidationError
        Treated or control group empty in some study year.
    """
    frame = ds._frame
    years = tuple(years) if years is not None else ds.years
    by_ward = frame.groupby(["hospital_id", "ward_id"], sort=True)
    switching = [tuple(k) for k, v in by_ward["treated"].nunique().items() if v > 1]

    present = by_ward["year"].unique()
    attrition = {}
    for key, ys in present.items():
        missing = sorted(set(years) - set(int(y) for y in ys))
        if missing:
            attrition[tuple(key)] = missing
            logger.warning("ward %s/%s absent in years %s", key[0], key[1], missing)

    wards_year = frame.drop_duplicates(["hospital_id", "ward_id", "year"])
    counts = {}
    for y in years:
        sub = wards_year[wards_year["year"] == y]
        counts[y] = {"treated": int((sub["treated"] == 1).sum()),
                     "control": int((sub["treated"] == 0).sum())}
    report = DidAssumptionReport(switching, attrition, counts)
    for y, c in counts.items():
        for group in ("treated", "control"):
            if c[group] == 0:
                exc = ValidationError(f"{group} group is empty in year {y}")
                exc.report = report
                raise exc
    return report
