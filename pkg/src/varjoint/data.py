"""Long-format longitudinal data, outcomes, and variance regimes."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .basis import BasisSpec, build_knots

log = logging.getLogger(__name__)

UNIFORM_REGIME = "uniform"


class SchemaError(ValueError):
    """Input table is missing required columns."""


class DataError(ValueError):
    """Input values violate the data model."""


@dataclass
class SubjectSeries:
    subject_id: str
    times: np.ndarray
    values: np.ndarray
    periods: list[str] | None = None
    outcome: int | None = None
    covariates: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.covariates is not None:
            self.covariates = np.asarray(self.covariates, dtype=float)
        validate_series(self)

    @property
    def n_obs(self) -> int:
        return self.times.size


def validate_series(s: SubjectSeries, min_obs: int = 2) -> None:
    if s.times.ndim != 1 or s.times.shape != s.values.shape:
        raise DataError(f"subject {s.subject_id}: times and values differ in length")
    if s.times.size < min_obs:
        raise DataError(f"subject {s.subject_id}: {s.times.size} observations, need >= {min_obs}")
    if np.any(np.diff(s.times) <= 0):
        raise DataError(f"subject {s.subject_id}: times not strictly increasing")
    if not (np.all(np.isfinite(s.times)) and np.all(np.isfinite(s.values))):
        raise DataError(f"subject {s.subject_id}: non-finite time or value")
    if s.outcome is not None and s.outcome not in (0, 1):
        raise DataError(f"subject {s.subject_id}: outcome {s.outcome!r} not in {{0, 1}}")
    if s.periods is not None:
        if len(s.periods) != s.times.size:
            raise DataError(f"subject {s.subject_id}: one period label per observation required")
        seen = set()
        prev = None
        for lab in s.periods:
            if lab != prev:
                if lab in seen:
                    raise DataError(
                        f"subject {s.subject_id}: period {lab!r} is not contiguous")
                seen.add(lab)
                prev = lab


@dataclass
class RegimeMap:
    """Regime index of every observation and every spline coefficient.

    ``obs_regime[i]`` and ``coef_regime[i]`` are integer arrays indexing
    ``regime_names`` for subject ``i``.
    """

    regime_names: tuple[str, ...]
    obs_regime: list[np.ndarray]
    coef_regime: list[np.ndarray]

    @property
    def n_regimes(self) -> int:
        return len(self.regime_names)


@dataclass
class Dataset:
    subjects: list[SubjectSeries]
    basis: BasisSpec
    regimes: RegimeMap
    rejected: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for s in self.subjects:
            if s.times[0] < self.basis.lower or s.times[-1] > self.basis.upper:
                raise DataError(f"subject {s.subject_id}: times outside knot range")

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def has_outcome(self) -> bool:
        return bool(self.subjects) and all(s.outcome is not None for s in self.subjects)

    @property
    def outcomes(self) -> np.ndarray:
        return np.array([s.outcome for s in self.subjects], dtype=int)

    @property
    def n_covariates(self) -> int:
        c = self.subjects[0].covariates if self.subjects else None
        return 0 if c is None else c.size

    @property
    def covariates(self) -> np.ndarray:
        p = self.n_covariates
        if p == 0:
            return np.zeros((self.n_subjects, 0))
        return np.vstack([s.covariates for s in self.subjects])

    @property
    def subject_ids(self) -> list[str]:
        return [s.subject_id for s in self.subjects]

    def with_outcomes(self, outcomes, covariates=None) -> "Dataset":
        """Copy with outcomes (and optionally covariates) replaced."""
        subjects = []
        for i, s in enumerate(self.subjects):
            cov = s.covariates if covariates is None else np.asarray(covariates[i], dtype=float)
            subjects.append(SubjectSeries(
                s.subject_id, s.times, s.values, s.periods, int(outcomes[i]), cov))
        return Dataset(subjects, self.basis, self.regimes, dict(self.rejected))


def assign_coef_regimes(basis: BasisSpec, series: SubjectSeries,
                        regime_names) -> np.ndarray:
    """Regime of each coefficient, read off at its Greville abscissa.

    A coefficient belongs to the regime whose first observation is the
    latest one at or before the abscissa.  Abscissae outside the subject's
    observed range take the nearest regime (with a warning).
    """
    names = list(regime_names)
    g = basis.greville()
    if series.periods is None:
        return np.zeros(g.size, dtype=int)
    obs = np.array([names.index(p) for p in series.periods], dtype=int)
    idx = np.searchsorted(series.times, g, side="right") - 1
    outside = (g < series.times[0]) | (g > series.times[-1])
    if np.any(outside):
        warnings.warn(
            f"subject {series.subject_id}: {int(outside.sum())} Greville points outside "
            "the labelled range; assigned to the nearest regime", stacklevel=2)
    idx = np.clip(idx, 0, series.times.size - 1)
    return obs[idx]


def regime_order(subjects) -> tuple[str, ...]:
    names: list[str] = []
    for s in subjects:
        for lab in s.periods or ():
            if lab not in names:
                names.append(lab)
    return tuple(names)


def build_regimes(subjects, basis: BasisSpec, use_regimes: bool = True) -> RegimeMap:
    labelled = [s.periods is not None for s in subjects]
    if use_regimes and any(labelled):
        if not all(labelled):
            raise DataError("period labels present for some subjects only")
        names = regime_order(subjects)
        obs = [np.array([names.index(p) for p in s.periods], dtype=int) for s in subjects]
        coef = [assign_coef_regimes(basis, s, names) for s in subjects]
        return RegimeMap(names, obs, coef)
    L = basis.basis_count
    return RegimeMap(
        (UNIFORM_REGIME,),
        [np.zeros(s.n_obs, dtype=int) for s in subjects],
        [np.zeros(L, dtype=int) for _ in subjects])


def make_dataset(subjects, percentile_step: float = 2.0, degree: int = 3,
                 use_regimes: bool = True, basis: BasisSpec | None = None) -> Dataset:
    """Build the shared basis from pooled times and attach regimes."""
    subjects = list(subjects)
    if not subjects:
        raise DataError("no subjects")
    if basis is None:
        basis = build_knots(np.concatenate([s.times for s in subjects]),
                            percentile_step, degree)
    return Dataset(subjects, basis, build_regimes(subjects, basis, use_regimes))


DEFAULT_COLUMNS = {
    "subject_id": "subject_id",
    "time": "time",
    "value": "value",
    "period": "period",
    "outcome": "outcome",
}


def _read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        lines = (line for line in fh if not line.startswith("#"))
        reader = csv.DictReader(lines)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: missing header row")
        return list(reader.fieldnames), list(reader)


def _parse_outcome(raw, sid):
    try:
        y = float(raw)
    except ValueError:
        raise DataError(f"subject {sid}: outcome {raw!r} not in {{0, 1}}") from None
    if y not in (0.0, 1.0):
        raise DataError(f"subject {sid}: outcome {raw!r} not in {{0, 1}}")
    return int(y)


def load_long_csv(path, outcome_path=None, column_map=None, min_obs: int = 2,
                  percentile_step: float = 2.0, degree: int = 3,
                  use_regimes: bool = True) -> Dataset:
    """Read ``subject_id,time,value[,period][,outcome]`` plus an outcome table.

    Subjects with fewer than ``min_obs`` observations are dropped and listed
    in ``Dataset.rejected``.  Lines beginning with ``#`` are ignored.
    """
    cols = dict(DEFAULT_COLUMNS)
    cols.update(column_map or {})
    header, rows = _read_rows(path)
    missing = [cols[k] for k in ("subject_id", "time", "value") if cols[k] not in header]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    has_period = cols["period"] in header
    inline_outcome = cols["outcome"] in header

    order: list[str] = []
    grouped: dict[str, dict] = {}
    for row in rows:
        sid = row[cols["subject_id"]]
        g = grouped.get(sid)
        if g is None:
            g = grouped[sid] = {"t": [], "x": [], "p": [], "y": set()}
            order.append(sid)
        try:
            g["t"].append(float(row[cols["time"]]))
            g["x"].append(float(row[cols["value"]]))
        except ValueError as exc:
            raise DataError(f"subject {sid}: unparseable number ({exc})") from None
        if has_period:
            g["p"].append(row[cols["period"]])
        if inline_outcome and row[cols["outcome"]] != "":
            g["y"].add(_parse_outcome(row[cols["outcome"]], sid))

    outcomes: dict[str, tuple[int, np.ndarray | None]] = {}
    if outcome_path is not None:
        oheader, orows = _read_rows(outcome_path)
        for need in (cols["subject_id"], cols["outcome"]):
            if need not in oheader:
                raise SchemaError(f"{outcome_path}: missing column {need!r}")
        zcols = [c for c in oheader if c not in (cols["subject_id"], cols["outcome"])]
        for row in orows:
            sid = row[cols["subject_id"]]
            y = _parse_outcome(row[cols["outcome"]], sid)
            z = np.array([float(row[c]) for c in zcols]) if zcols else None
            outcomes[sid] = (y, z)

    subjects = []
    rejected: dict[str, str] = {}
    for sid in order:
        g = grouped[sid]
        t = np.asarray(g["t"])
        if t.size < min_obs:
            rejected[sid] = f"{t.size} observations (< {min_obs})"
            continue
        if np.any(np.diff(t) <= 0):
            raise DataError(f"subject {sid}: times not strictly increasing")
        if len(g["y"]) > 1:
            raise DataError(f"subject {sid}: conflicting outcomes")
        y = next(iter(g["y"])) if g["y"] else None
        z = None
        if outcome_path is not None:
            if sid not in outcomes:
                raise DataError(f"subject {sid}: no row in outcome table")
            y, z = outcomes[sid]
        subjects.append(SubjectSeries(
            sid, t, np.asarray(g["x"]), g["p"] if has_period else None, y, z))
    for sid, why in rejected.items():
        log.warning("rejected subject %s: %s", sid, why)
    ds = make_dataset(subjects, percentile_step, degree, use_regimes)
    ds.rejected = rejected
    return ds


def _fmt(x: float) -> str:
    return repr(float(x))


def save_long_csv(dataset: Dataset, path, outcome_path=None, header_comment=None) -> None:
    """Write the canonical long CSV (and outcome CSV when outcomes exist)."""
    with_period = dataset.subjects and dataset.subjects[0].periods is not None
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "time", "value"] + (["period"] if with_period else []))
        for s in dataset.subjects:
            for j in range(s.n_obs):
                row = [s.subject_id, _fmt(s.times[j]), _fmt(s.values[j])]
                if with_period:
                    row.append(s.periods[j])
                w.writerow(row)
    if outcome_path is not None and dataset.has_outcome:
        p = dataset.n_covariates
        with open(outcome_path, "w", newline="", encoding="utf-8") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject_id", "outcome"] + [f"z{k + 1}" for k in range(p)])
            for s in dataset.subjects:
                z = [] if p == 0 else [_fmt(v) for v in s.covariates]
                w.writerow([s.subject_id, str(int(s.outcome))] + z)
