"""Dataset ingestion and validation.

A dataset holds a binary treatment t, a binary observed outcome y, and a
covariate matrix partitioned into non-shadow columns u (allowed to drive
treatment) and shadow columns z (excluded from the treatment model but
predictive of the untreated outcome).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .exceptions import MissingColumn, NonBinaryValue, ParseError

# Columns with more distinct values than this are treated as continuous
# by the validation heuristics (advisory only).
CONTINUOUS_CUTOFF = 10


@dataclass(frozen=True)
class Observation:
    """One subject: treatment, observed outcome, covariate split."""

    t: int
    y: int
    u: np.ndarray
    z: np.ndarray

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.u, self.z])


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Immutable column store for (t, y, u, z) with consistent dimensions."""

    t: np.ndarray
    y: np.ndarray
    u: np.ndarray
    z: np.ndarray
    u_names: tuple = ()
    z_names: tuple = ()

    def __post_init__(self):
        t = _frozen(np.asarray(self.t, dtype=np.int64).ravel())
        y = _frozen(np.asarray(self.y, dtype=np.int64).ravel())
        u = _frozen(np.atleast_2d(np.asarray(self.u, dtype=float)))
        z = _frozen(np.atleast_2d(np.asarray(self.z, dtype=float)))
        n = t.shape[0]
        if n < 1:
            raise ValueError("dataset needs at least one row")
        if y.shape[0] != n or u.shape[0] != n or z.shape[0] != n:
            raise ValueError("t, y, u, z must have the same number of rows")
        bad_t = np.nonzero((t != 0) & (t != 1))[0]
        if bad_t.size:
            raise NonBinaryValue(int(bad_t[0]) + 1, "t", int(t[bad_t[0]]))
        bad_y = np.nonzero((y != 0) & (y != 1))[0]
        if bad_y.size:
            raise NonBinaryValue(int(bad_y[0]) + 1, "y", int(y[bad_y[0]]))
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(z))):
            raise ValueError("covariates must be finite (missing values are rejected)")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "z", z)
        u_names = tuple(self.u_names) or tuple(f"u{i + 1}" for i in range(u.shape[1]))
        z_names = tuple(self.z_names) or tuple(f"z{i + 1}" for i in range(z.shape[1]))
        if len(u_names) != u.shape[1] or len(z_names) != z.shape[1]:
            raise ValueError("column-name counts do not match covariate dimensions")
        object.__setattr__(self, "u_names", u_names)
        object.__setattr__(self, "z_names", z_names)

    @property
    def n(self) -> int:
        return self.t.shape[0]

    @property
    def p(self) -> int:
        return self.u.shape[1]

    @property
    def q(self) -> int:
        return self.z.shape[1]

    @property
    def x(self) -> np.ndarray:
        """Full covariate matrix (u columns first, then z)."""
        return np.hstack([self.u, self.z])

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> Observation:
        return Observation(int(self.t[i]), int(self.y[i]), self.u[i].copy(), self.z[i].copy())

    def observations(self):
        return (self[i] for i in range(self.n))

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.t[rows], self.y[rows], self.u[rows], self.z[rows],
                       self.u_names, self.z_names)


@dataclass(frozen=True)
class ValidationReport:
    """Advisory summary: arm counts, support sizes, completeness heuristic."""

    n: int
    n_treated: int
    n_control: int
    outcome_support: int
    shadow_support: object  # int, or the string "continuous"
    completeness_heuristic_pass: bool
    warnings: tuple = field(default=())


def _distinct_counts(z: np.ndarray):
    return [np.unique(z[:, j]).size for j in range(z.shape[1])]


def validate(ds: Dataset) -> ValidationReport:
    """Report support sizes and the completeness heuristic; never mutates.

    The heuristic passes when the outcome support is no larger than the
    observed shadow support, or when any shadow column looks continuous.
    Solvers enforce their own preconditions; this report is advisory.
    """
    n1 = int(ds.t.sum())
    n0 = ds.n - n1
    l = int(np.unique(ds.y).size)
    counts = _distinct_counts(ds.z)
    continuous = any(c > CONTINUOUS_CUTOFF for c in counts)
    if continuous:
        m = "continuous"
        passes = True
    else:
        m = int(np.prod(counts)) if counts else 0
        passes = l <= m
    warnings = []
    if n1 == 0 or n0 == 0:
        warnings.append("single treatment arm")
    elif n1 < 5:
        warnings.append(f"treated arm has only {n1} rows")
    elif n0 < 5:
        warnings.append(f"control arm has only {n0} rows")
    if not passes:
        warnings.append(
            f"outcome support {l} exceeds shadow support {m}; identification heuristic fails"
        )
    return ValidationReport(ds.n, n1, n0, l, m, passes, tuple(warnings))


def standardize(ds: Dataset) -> Dataset:
    """Center and scale the continuous covariate columns (opt-in).

    A column is rescaled only when it has more than CONTINUOUS_CUTOFF
    distinct values; binary/categorical codes are left alone.
    """

    def scale(mat):
        out = np.array(mat, dtype=float)
        for j in range(out.shape[1]):
            col = out[:, j]
            if np.unique(col).size > CONTINUOUS_CUTOFF:
                sd = col.std()
                out[:, j] = (col - col.mean()) / (sd if sd > 0 else 1.0)
        return out

    return Dataset(ds.t, ds.y, scale(ds.u), scale(ds.z), ds.u_names, ds.z_names)


# ------------------------------------------------------------------ CSV


def _parse_binary(value, row, column):
    s = value.strip()
    try:
        v = int(s)
    except ValueError:
        try:  # reject 1.5 but accept "1.0"
            f = float(s)
        except ValueError:
            raise ParseError(row, column, value) from None
        if f not in (0.0, 1.0):
            raise NonBinaryValue(row, column, value) from None
        v = int(f)
    if v not in (0, 1):
        raise NonBinaryValue(row, column, value)
    return v


def _parse_float(value, row, column):
    s = value.strip()
    if not s:
        raise ParseError(row, column, value)
    try:
        f = float(s)
    except ValueError:
        raise ParseError(row, column, value) from None
    if not np.isfinite(f):
        raise ParseError(row, column, value)
    return f


def read_csv_columns(path):
    """Read a headered CSV into {column: list of raw strings}."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(0, "<header>", "") from None
        header = [h.strip() for h in header]
        rows = [row for row in reader if row and any(cell.strip() for cell in row)]
    columns = {}
    for j, name in enumerate(header):
        columns[name] = [row[j] if j < len(row) else "" for row in rows]
    return columns


def dataset_from_columns(columns, schema) -> Dataset:
    """Build a Dataset from raw string columns and a {t,y,u,z} mapping."""
    t_col, y_col = schema["t"], schema["y"]
    u_cols, z_cols = list(schema["u"]), list(schema["z"])
    for name in [t_col, y_col, *u_cols, *z_cols]:
        if name not in columns:
            raise MissingColumn(name)
    nrows = len(columns[t_col])
    t = [_parse_binary(columns[t_col][i], i + 1, t_col) for i in range(nrows)]
    y = [_parse_binary(columns[y_col][i], i + 1, y_col) for i in range(nrows)]
    u = [[_parse_float(columns[c][i], i + 1, c) for c in u_cols] for i in range(nrows)]
    z = [[_parse_float(columns[c][i], i + 1, c) for c in z_cols] for i in range(nrows)]
    return Dataset(
        np.array(t), np.array(y),
        np.array(u, dtype=float).reshape(nrows, len(u_cols)),
        np.array(z, dtype=float).reshape(nrows, len(z_cols)),
        tuple(u_cols), tuple(z_cols),
    )


def load_dataset(path, schema) -> Dataset:
    """Load a CSV with strict numeric parsing.

    schema maps {"t": col, "y": col, "u": [cols...], "z": [cols...]}.
    Rows keep file order; t and y must be 0/1; covariates must be finite
    decimals (no silent coercion, no imputation).
    """
    return dataset_from_columns(read_csv_columns(path), schema)


def save_dataset(ds: Dataset, path) -> None:
    """Write a CSV that load_dataset round-trips bit-exactly (repr floats)."""
    header = ["t", "y", *ds.u_names, *ds.z_names]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(ds.n):
            writer.writerow(
                [int(ds.t[i]), int(ds.y[i])]
                + [repr(float(v)) for v in ds.u[i]]
                + [repr(float(v)) for v in ds.z[i]]
            )
