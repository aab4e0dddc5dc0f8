"""Main study / external validation study containers and CSV ingestion."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np


class DataError(ValueError):
    """Malformed or incomplete input data."""


class MainRecord(NamedTuple):
    t_obs: float
    event: bool
    mediator: float
    exposure_star: float
    covariates: tuple[float, ...]


class ValidationRecord(NamedTuple):
    t_obs: float
    mediator: float
    exposure_star: float
    exposure_true: float
    covariates: tuple[float, ...]


def _frozen(a, ndim=1):
    arr = np.array(a, dtype=float)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(-1, 0) if arr.size == 0 else arr[:, None]
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class MainData:
    """Columns of the main study. ``exposure_true`` is only known to the simulator."""

    time: np.ndarray
    event: np.ndarray
    mediator: np.ndarray
    exposure_star: np.ndarray
    covariates: np.ndarray
    exposure_true: np.ndarray | None = None

    def __post_init__(self):
        for name in ("time", "event", "mediator", "exposure_star"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "covariates", _frozen(self.covariates, ndim=2))
        if self.exposure_true is not None:
            object.__setattr__(self, "exposure_true", _frozen(self.exposure_true))
        n = self.time.shape[0]
        if self.covariates.shape[0] != n and not (n == 0 and self.covariates.size == 0):
            raise DataError("covariate rows do not match the number of main-study records")
        for name in ("event", "mediator", "exposure_star"):
            if getattr(self, name).shape[0] != n:
                raise DataError(f"main-study column {name!r} has the wrong length")

    def __len__(self):
        return self.time.shape[0]

    def take(self, idx) -> "MainData":
        return MainData(
            self.time[idx],
            self.event[idx],
            self.mediator[idx],
            self.exposure_star[idx],
            self.covariates[idx],
            None if self.exposure_true is None else self.exposure_true[idx],
        )


@dataclass(frozen=True, eq=False)
class ValidationData:
    time: np.ndarray
    mediator: np.ndarray
    exposure_star: np.ndarray
    exposure: np.ndarray
    covariates: np.ndarray

    def __post_init__(self):
        for name in ("time", "mediator", "exposure_star", "exposure"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "covariates", _frozen(self.covariates, ndim=2))
        n = self.time.shape[0]
        for name in ("mediator", "exposure_star", "exposure"):
            if getattr(self, name).shape[0] != n:
                raise DataError(f"validation column {name!r} has the wrong length")

    def __len__(self):
        return self.time.shape[0]

    def take(self, idx) -> "ValidationData":
        return ValidationData(
            self.time[idx], self.mediator[idx], self.exposure_star[idx], self.exposure[idx], self.covariates[idx]
        )


@dataclass(frozen=True, eq=False)
class Study:
    """A main study paired with an external validation study.

    Membership is implicit: main rows have R=1, validation rows R=0. The study
    is immutable (all arrays are read-only) and may be shared across workers.
    """

    main: MainData
    validation: ValidationData
    covariate_names: tuple[str, ...] = ()
    max_followup: float | None = None

    def __post_init__(self):
        p_main = self.main.covariates.shape[1] if self.main.covariates.ndim == 2 else 0
        p_val = self.validation.covariates.shape[1] if self.validation.covariates.ndim == 2 else 0
        if len(self.main) and len(self.validation) and p_main != p_val:
            raise DataError(f"main study has {p_main} covariates, validation has {p_val}")
        p = p_main if len(self.main) else p_val
        names = tuple(self.covariate_names) or tuple(f"w{j + 1}" for j in range(p))
        if len(names) != p:
            raise DataError(f"{len(names)} covariate names for {p} covariate columns")
        object.__setattr__(self, "covariate_names", names)
        if self.max_followup is None:
            tmax = float(self.main.time.max()) if len(self.main) else float(self.validation.time.max())
            object.__setattr__(self, "max_followup", tmax)
        if len(self.main) and float(self.main.time.max()) > self.max_followup:
            raise DataError("main-study times exceed the maximum follow-up time")
        for arr in (self.main.time, self.validation.time):
            if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0):
                raise DataError("observed times must be finite and non-negative")

    @property
    def n1(self) -> int:
        return len(self.main)

    @property
    def n2(self) -> int:
        return len(self.validation)

    @property
    def p(self) -> int:
        return len(self.covariate_names)

    @property
    def t_v_star(self) -> float:
        """Maximum observed time in the validation study."""
        return float(self.validation.time.max())

    def main_records(self) -> Iterator[MainRecord]:
        m = self.main
        for i in range(self.n1):
            yield MainRecord(
                float(m.time[i]), bool(m.event[i]), float(m.mediator[i]), float(m.exposure_star[i]),
                tuple(float(x) for x in m.covariates[i]),
            )

    def validation_records(self) -> Iterator[ValidationRecord]:
        v = self.validation
        for i in range(self.n2):
            yield ValidationRecord(
                float(v.time[i]), float(v.mediator[i]), float(v.exposure_star[i]), float(v.exposure[i]),
                tuple(float(x) for x in v.covariates[i]),
            )

    def resample(self, rng: np.random.Generator) -> "Study":
        """Bootstrap copy: main and validation rows resampled separately."""
        i1 = rng.integers(0, self.n1, self.n1)
        i2 = rng.integers(0, self.n2, self.n2)
        return Study(self.main.take(i1), self.validation.take(i2), self.covariate_names, self.max_followup)

    def with_exposure_star(self, main_astar, val_astar) -> "Study":
        m, v = self.main, self.validation
        main = MainData(m.time, m.event, m.mediator, main_astar, m.covariates, m.exposure_true)
        val = ValidationData(v.time, v.mediator, val_astar, v.exposure, v.covariates)
        return Study(main, val, self.covariate_names, self.max_followup)


def study_from_records(
    main: Iterable[MainRecord],
    validation: Iterable[ValidationRecord],
    covariate_names: Sequence[str] = (),
    max_followup: float | None = None,
) -> Study:
    main, validation = list(main), list(validation)
    p = len(covariate_names) if covariate_names else (len(main[0].covariates) if main else 0)

    def cov(rows):
        return np.array([r.covariates for r in rows], dtype=float).reshape(len(rows), p)

    md = MainData(
        [r.t_obs for r in main], [float(r.event) for r in main], [r.mediator for r in main],
        [r.exposure_star for r in main], cov(main),
    )
    vd = ValidationData(
        [r.t_obs for r in validation], [r.mediator for r in validation], [r.exposure_star for r in validation],
        [r.exposure_true for r in validation], cov(validation),
    )
    return Study(md, vd, tuple(covariate_names), max_followup)


@dataclass(frozen=True)
class Schema:
    """Column names in the input CSV files."""

    time: str = "time"
    event: str = "event"
    mediator: str = "mediator"
    exposure_star: str = "exposure_star"
    exposure: str = "exposure"
    covariates: tuple[str, ...] = ()

    @classmethod
    def from_mapping(cls, m: Mapping) -> "Schema":
        kw = {k: m[k] for k in ("time", "event", "mediator", "exposure_star", "exposure") if k in m}
        cov = m.get("covariates", ())
        if isinstance(cov, str):
            cov = [c.strip() for c in cov.replace(";", ",").split(",") if c.strip()]
        unknown = set(m) - {"time", "event", "mediator", "exposure_star", "exposure", "covariates"}
        if unknown:
            raise DataError(f"unknown schema keys: {sorted(unknown)}")
        return cls(covariates=tuple(cov), **kw)


def _read_csv(path: Path, required: Sequence[str], what: str, optional: Sequence[str] = ()):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{what} file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        dup = sorted({h for h in header if header.count(h) > 1})
        if dup:
            raise DataError(f"{path}: duplicate column(s) {dup}")
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"{what} schema incomplete: {path} lacks column(s) {missing}")
        required = [*required, *(c for c in optional if c in header and c not in required)]
        pos = {c: header.index(c) for c in required}
        cols = {c: [] for c in required}
        for rowno, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            for c in required:
                j = pos[c]
                cell = row[j].strip() if j < len(row) else ""
                if cell == "" or cell.upper() in ("NA", "NAN"):
                    raise DataError(f"{path}: row {rowno}: missing value in column {c!r}")
                try:
                    val = float(cell)
                except ValueError:
                    raise DataError(f"{path}: row {rowno}: non-numeric value {cell!r} in column {c!r}") from None
                if not math.isfinite(val):
                    raise DataError(f"{path}: row {rowno}: non-finite value in column {c!r}")
                cols[c].append(val)
    return header, {c: np.array(v, dtype=float) for c, v in cols.items()}


def load_study(
    main_path, validation_path, schema: Schema | Mapping | None = None, max_followup: float | None = None
) -> Study:
    """Read the main and validation CSV files into a :class:`Study`.

    Missing values are rejected. An event column in the validation file is
    ignored with a warning (external validation design).
    """
    schema = Schema() if schema is None else schema
    if not isinstance(schema, Schema):
        schema = Schema.from_mapping(schema)
    cov = list(schema.covariates)
    main_cols = [schema.time, schema.event, schema.mediator, schema.exposure_star, *cov]
    val_cols = [schema.time, schema.mediator, schema.exposure_star, schema.exposure, *cov]

    _, m = _read_csv(main_path, main_cols, "main", optional=[schema.exposure])
    ev = m[schema.event]
    bad = np.flatnonzero((ev != 0) & (ev != 1))
    if bad.size:
        raise DataError(f"{main_path}: row {int(bad[0]) + 1}: event value {ev[bad[0]]:g} is not 0 or 1")
    if m[schema.time].size and m[schema.time].min() < 0:
        row = int(np.argmin(m[schema.time])) + 1
        raise DataError(f"{main_path}: row {row}: negative time")
    if m[schema.time].size == 0:
        raise DataError(f"{main_path}: no main-study records")

    vheader, v = _read_csv(validation_path, val_cols, "validation")
    if schema.event in vheader:
        warnings.warn(
            f"validation file {validation_path} has an event column {schema.event!r}; it is ignored",
            stacklevel=2,
        )

    def covmat(d):
        n = d[schema.time].shape[0]
        return np.column_stack([d[c] for c in cov]) if cov else np.empty((n, 0))

    # a true-exposure column in the main file is optional; it enables the gold-standard fit
    main = MainData(m[schema.time], ev, m[schema.mediator], m[schema.exposure_star], covmat(m), m.get(schema.exposure))
    val = ValidationData(v[schema.time], v[schema.mediator], v[schema.exposure_star], v[schema.exposure], covmat(v))
    return Study(main, val, tuple(cov), max_followup)


def write_study(study: Study, main_path, validation_path, schema: Schema | None = None) -> None:
    """Write both studies as CSV. Floats use ``repr`` so a reload is bit-identical."""
    schema = schema or Schema(covariates=study.covariate_names)
    cov = list(schema.covariates)
    with Path(main_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        true_a = study.main.exposure_true
        extra = [schema.exposure] if true_a is not None else []
        w.writerow([schema.time, schema.event, schema.mediator, schema.exposure_star, *cov, *extra])
        for i, r in enumerate(study.main_records()):
            tail = [repr(float(true_a[i]))] if true_a is not None else []
            w.writerow(
                [repr(r.t_obs), int(r.event), repr(r.mediator), repr(r.exposure_star), *map(repr, r.covariates), *tail]
            )
    with Path(validation_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([schema.time, schema.mediator, schema.exposure_star, schema.exposure, *cov])
        for r in study.validation_records():
            w.writerow(
                [repr(r.t_obs), repr(r.mediator), repr(r.exposure_star), repr(r.exposure_true), *map(repr, r.covariates)]
            )


@dataclass
class StudyReport:
    n1: int
    n2: int
    n_events: int
    event_rate: float
    rare_outcome: bool
    corr_a_astar: float
    t_star: float
    t_v_star: float
    n_main_beyond_tv: int
    main_summary: dict = field(default_factory=dict)
    validation_summary: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return dict(self.__dict__)


RARE_OUTCOME_RATE = 0.10


def _summary(cols: Mapping[str, np.ndarray]) -> dict:
    return {k: {"mean": float(np.mean(v)), "sd": float(np.std(v, ddof=1)) if v.size > 1 else 0.0} for k, v in cols.items()}


def validate_study(study: Study) -> StudyReport:
    """Descriptive diagnostics for a study pair. Does not modify ``study``."""
    m, v = study.main, study.validation
    n_events = int(m.event.sum())
    rate = n_events / study.n1 if study.n1 else float("nan")
    a, astar = v.exposure, v.exposure_star
    if a.size > 1 and np.std(a) > 0 and np.std(astar) > 0:
        corr = float(np.corrcoef(a, astar)[0, 1])
    else:
        corr = float("nan")
    names = study.covariate_names
    main_cols = {"time": m.time, "mediator": m.mediator, "exposure_star": m.exposure_star}
    main_cols.update({n: m.covariates[:, j] for j, n in enumerate(names)})
    val_cols = {"time": v.time, "mediator": v.mediator, "exposure_star": astar, "exposure": a}
    val_cols.update({n: v.covariates[:, j] for j, n in enumerate(names)})
    tv = study.t_v_star if study.n2 else float("nan")
    return StudyReport(
        n1=study.n1,
        n2=study.n2,
        n_events=n_events,
        event_rate=rate,
        rare_outcome=bool(rate < RARE_OUTCOME_RATE),
        corr_a_astar=corr,
        t_star=float(study.max_followup),
        t_v_star=tv,
        n_main_beyond_tv=int(np.sum(m.time > tv)) if study.n2 else 0,
        main_summary=_summary(main_cols),
        validation_summary=_summary(val_cols),
    )
