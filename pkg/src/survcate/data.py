"""Survival cohort data model.

A :class:`Cohort` holds observed ``(U, delta, A, X)`` rows validated against a
:class:`CovariateSchema`. Everything downstream consumes cohorts through
numpy arrays; categorical covariates are stored as level codes and one-hot
expanded by :meth:`Cohort.design_matrix` for the forest learners.
"""

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataError

KINDS = ("continuous", "binary", "categorical")
RESERVED = ("time", "event", "treatment")


@dataclass(frozen=True)
class Covariate:
    name: str
    kind: str = "continuous"
    levels: tuple = ()

    def __post_init__(self):
        if not self.name:
            raise DataError("covariate names must be nonempty")
        if self.kind not in KINDS:
            raise DataError(f"covariate {self.name!r}: unknown kind {self.kind!r}")
        levels = tuple(self.levels)
        if self.kind == "categorical":
            if not levels:
                raise DataError(f"categorical covariate {self.name!r} needs levels")
            levels = tuple(str(v) for v in levels)
        elif self.kind == "binary":
            levels = tuple(float(v) for v in (levels or (0.0, 1.0)))
            if len(levels) != 2 or levels[0] == levels[1]:
                raise DataError(f"binary covariate {self.name!r} needs two distinct levels")
        elif levels:
            raise DataError(f"continuous covariate {self.name!r} takes no levels")
        if len(set(levels)) != len(levels):
            raise DataError(f"covariate {self.name!r} has duplicated levels")
        object.__setattr__(self, "levels", levels)

    def to_dict(self):
        d = {"name": self.name, "kind": self.kind}
        if self.kind == "categorical":
            d["levels"] = list(self.levels)
        elif self.kind == "binary":
            d["levels"] = [_num(v) for v in self.levels]
        return d


def _num(v):
    v = float(v)
    return int(v) if v.is_integer() else v


@dataclass(frozen=True)
class CovariateSchema:
    """Ordered covariate declarations (names, kinds, categorical levels)."""

    covariates: tuple

    def __post_init__(self):
        covs = tuple(
            c if isinstance(c, Covariate) else Covariate(**c) for c in self.covariates
        )
        if not covs:
            raise DataError("schema must declare at least one covariate")
        names = [c.name for c in covs]
        if len(set(names)) != len(names):
            raise DataError("covariate names must be unique")
        clash = set(names) & set(RESERVED)
        if clash:
            raise DataError(f"covariate names clash with reserved columns: {sorted(clash)}")
        object.__setattr__(self, "covariates", covs)

    @property
    def names(self):
        return [c.name for c in self.covariates]

    @property
    def kinds(self):
        return [c.kind for c in self.covariates]

    def __len__(self):
        return len(self.covariates)

    @classmethod
    def from_dict(cls, d):
        if isinstance(d, dict):
            unknown = set(d) - {"covariates"}
            if unknown:
                raise DataError(f"unknown schema keys: {sorted(unknown)}")
            d = d["covariates"]
        return cls(tuple(Covariate(**c) for c in d))

    @classmethod
    def continuous(cls, names):
        return cls(tuple(Covariate(n) for n in names))

    def to_dict(self):
        return {"covariates": [c.to_dict() for c in self.covariates]}

    def encoded_names(self):
        """Column names of the one-hot design matrix."""
        out = []
        for c in self.covariates:
            if c.kind == "categorical":
                out.extend(f"{c.name}={lvl}" for lvl in c.levels)
            else:
                out.append(c.name)
        return out

    def groups(self):
        """Design-matrix column indices belonging to each original covariate."""
        groups, j = [], 0
        for c in self.covariates:
            width = len(c.levels) if c.kind == "categorical" else 1
            groups.append(list(range(j, j + width)))
            j += width
        return groups


@dataclass(frozen=True)
class SurvivalRecord:
    time: float
    event: bool
    treatment: int
    x: tuple = ()


@dataclass(frozen=True)
class TargetTime:
    t_star: float

    def __post_init__(self):
        t = float(self.t_star)
        if not (t > 0 and math.isfinite(t)):
            raise DataError(f"target time must be positive and finite, got {self.t_star}")
        object.__setattr__(self, "t_star", t)

    def check_against(self, cohort):
        if self.t_star > cohort.time.max():
            warnings.warn(
                f"t*={self.t_star} exceeds the largest observed time {cohort.time.max()}",
                stacklevel=2,
            )
        return self


def _frozen(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Cohort:
    """Validated survival cohort.

    ``covariates`` is an ``(n, p)`` float array in schema order; categorical
    entries hold the level index.
    """

    schema: CovariateSchema
    time: np.ndarray
    event: np.ndarray
    treatment: np.ndarray
    covariates: np.ndarray

    def __post_init__(self):
        time = np.asarray(self.time, dtype=np.float64)
        n = time.shape[0]
        if n < 1:
            raise DataError("cohort must contain at least one record")
        X = np.asarray(self.covariates, dtype=np.float64).reshape(n, -1)
        if X.shape[1] != len(self.schema):
            raise DataError("covariate matrix does not match the schema")
        object.__setattr__(self, "time", _frozen(time))
        object.__setattr__(self, "event", _frozen(np.asarray(self.event, dtype=bool)))
        object.__setattr__(self, "treatment", _frozen(np.asarray(self.treatment, dtype=np.int8)))
        object.__setattr__(self, "covariates", _frozen(X))

    @property
    def n(self):
        return self.time.shape[0]

    def __len__(self):
        return self.n

    def record(self, i):
        return SurvivalRecord(
            float(self.time[i]), bool(self.event[i]), int(self.treatment[i]),
            tuple(self.covariates[i]),
        )

    def records(self):
        return [self.record(i) for i in range(self.n)]

    def subset(self, index):
        index = np.asarray(index)
        return Cohort(self.schema, self.time[index], self.event[index],
                      self.treatment[index], self.covariates[index])

    def design_matrix(self):
        """One-hot expanded covariates, float64, C-contiguous."""
        return encode_covariates(self.covariates, self.schema)

    def __eq__(self, other):
        if not isinstance(other, Cohort):
            return NotImplemented
        return (
            self.schema == other.schema
            and np.array_equal(self.time, other.time)
            and np.array_equal(self.event, other.event)
            and np.array_equal(self.treatment, other.treatment)
            and np.array_equal(self.covariates, other.covariates)
        )


def encode_covariates(covariates, schema):
    covariates = np.asarray(covariates, dtype=np.float64)
    cols = []
    for j, c in enumerate(schema.covariates):
        col = covariates[:, j]
        if c.kind == "categorical":
            codes = col.astype(np.int64)
            cols.append((codes[:, None] == np.arange(len(c.levels))[None, :]).astype(np.float64))
        else:
            cols.append(col[:, None])
    return np.ascontiguousarray(np.hstack(cols))


@dataclass(frozen=True, eq=False)
class CompleteCaseView:
    """Rows whose survival status at t* is known from the observed data."""

    indices: np.ndarray
    survival_indicator: np.ndarray
    t_star: float = field(default=float("nan"))

    @property
    def n_complete(self):
        return int(self.indices.shape[0])


def _parse_float(value, what, row):
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise DataError(f"row {row}: {what} value {value!r} is not numeric") from None
    if not math.isfinite(v):
        raise DataError(f"row {row}: {what} value {value!r} is not finite")
    return v


def _is_missing(value):
    return value is None or (isinstance(value, str) and value.strip() == "") or (
        isinstance(value, float) and math.isnan(value)
    )


def _parse_covariates(row, schema, r):
    x = []
    for c in schema.covariates:
        v = row[c.name]
        if c.kind == "categorical":
            s = str(v).strip()
            if s not in c.levels:
                raise DataError(f"row {r}: unknown level {s!r} for {c.name!r}")
            x.append(float(c.levels.index(s)))
        else:
            f = _parse_float(v, c.name, r)
            if c.kind == "binary" and f not in c.levels:
                raise DataError(f"row {r}: binary {c.name!r} value {v!r} not in {list(c.levels)}")
            x.append(f)
    return x


def ingest_covariates(rows, schema):
    """Validate covariate-only rows; returns the one-hot design matrix.

    Columns outside the schema (outcomes, oracle values) are ignored.
    """
    if isinstance(schema, dict):
        schema = CovariateSchema.from_dict(schema)
    X = []
    for r, row in enumerate(rows, start=1):
        for col in schema.names:
            if col not in row or _is_missing(row[col]):
                raise DataError(f"row {r}: missing value for {col!r}")
        X.append(_parse_covariates(row, schema, r))
    if not X:
        raise DataError("no rows to read")
    return encode_covariates(np.array(X, dtype=np.float64), schema)


def ingest_cohort(rows, schema):
    """Validate tabular rows (mappings keyed by column name) into a :class:`Cohort`.

    Rows are numbered from 1 in error messages.
    """
    if isinstance(schema, dict):
        schema = CovariateSchema.from_dict(schema)
    time, event, treat, X = [], [], [], []
    for r, row in enumerate(rows, start=1):
        for col in (*RESERVED, *schema.names):
            if col not in row or _is_missing(row[col]):
                raise DataError(f"row {r}: missing value for {col!r}")
        u = _parse_float(row["time"], "time", r)
        if u < 0:
            raise DataError(f"row {r}: negative observed time {u}")
        d = _parse_float(row["event"], "event", r)
        if d not in (0.0, 1.0):
            raise DataError(f"row {r}: event must be 0 or 1, got {row['event']!r}")
        a = _parse_float(row["treatment"], "treatment", r)
        if a not in (0.0, 1.0):
            raise DataError(f"row {r}: treatment must be 0 or 1, got {row['treatment']!r}")
        x = _parse_covariates(row, schema, r)
        time.append(u)
        event.append(bool(d))
        treat.append(int(a))
        X.append(x)
    if not time:
        raise DataError("no rows to ingest")
    return Cohort(schema, np.array(time), np.array(event), np.array(treat),
                  np.array(X, dtype=np.float64).reshape(len(time), len(schema)))


def _fmt(v):
    return repr(float(v))


def cohort_rows(cohort):
    """Serialize a cohort back to string-valued row dicts (inverse of ingestion)."""
    rows = []
    for i in range(cohort.n):
        row = {"time": _fmt(cohort.time[i]), "event": str(int(cohort.event[i])),
               "treatment": str(int(cohort.treatment[i]))}
        for j, c in enumerate(cohort.schema.covariates):
            v = cohort.covariates[i, j]
            row[c.name] = c.levels[int(v)] if c.kind == "categorical" else _fmt(v)
        rows.append(row)
    return rows


def write_cohort_csv(cohort, path_or_buf, extra=None):
    """Write a cohort as comma-separated text; ``extra`` maps column name -> array."""
    header = [*RESERVED, *cohort.schema.names]
    extra = extra or {}
    header += list(extra)
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="", encoding="utf-8") if own else path_or_buf
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, row in enumerate(cohort_rows(cohort)):
            w.writerow([row[h] for h in header[: len(header) - len(extra)]]
                       + [_fmt(extra[k][i]) for k in extra])
    finally:
        if own:
            fh.close()


def read_cohort_csv(path_or_buf, schema):
    if isinstance(path_or_buf, str) and "\n" in path_or_buf:
        path_or_buf = io.StringIO(path_or_buf)
    own = not hasattr(path_or_buf, "read")
    fh = open(path_or_buf, newline="", encoding="utf-8") if own else path_or_buf
    try:
        return ingest_cohort(csv.DictReader(fh), schema)
    finally:
        if own:
            fh.close()


def read_covariates_csv(path_or_buf, schema):
    own = not hasattr(path_or_buf, "read")
    fh = open(path_or_buf, newline="", encoding="utf-8") if own else path_or_buf
    try:
        return ingest_covariates(csv.DictReader(fh), schema)
    finally:
        if own:
            fh.close()


def load_schema(path):
    with open(path, encoding="utf-8") as fh:
        return CovariateSchema.from_dict(json.load(fh))


def complete_case_view(cohort, t):
    """Rows with known ``I(T > t*)``: uncensored before t* or still observed at t*.

    A tie ``U == t*`` counts as surviving past t*.
    """
    t_star = t.t_star if isinstance(t, TargetTime) else float(t)
    survived = cohort.time >= t_star
    included = survived | cohort.event
    idx = np.flatnonzero(included)
    ind = survived[idx]
    idx.setflags(write=False)
    ind.setflags(write=False)
    return CompleteCaseView(idx, ind, t_star)


def censoring_min_time(record, t):
    """``min(U, t*)``: the time up to which a complete case must stay uncensored."""
    t_star = t.t_star if isinstance(t, TargetTime) else float(t)
    if not (record.time >= t_star or record.event):
        raise DataError("record censored before t* is not a complete case")
    return min(float(record.time), t_star)
