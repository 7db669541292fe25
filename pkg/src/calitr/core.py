"""Domain types, dataset validation and moment-constraint construction."""

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .exceptions import (
    DimensionMismatch,
    IndexOutOfRange,
    MissingColumns,
    MissingFile,
    NonBinaryTreatment,
    NonFinite,
    SingleArm,
    TooFewRows,
    UnsupportedMoment,
    ValidationError,
)

_XCOL = re.compile(r"^x(\d+)$")


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def add_intercept(X):
    """Prepend a column of ones: rows become (1, x^T)."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    return np.column_stack([np.ones(X.shape[0]), X])


@dataclass(frozen=True)
class SourceSample:
    """Fully observed sample of (covariates, binary treatment, outcome).

    Arrays are copied and made read-only on construction, so instances can be
    shared freely.
    """

    X: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    columns: tuple = field(default=None, compare=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        A = np.asarray(self.A, dtype=float).ravel()
        Y = np.asarray(self.Y, dtype=float).ravel()
        if X.ndim != 2 or X.shape[0] != A.shape[0] or A.shape[0] != Y.shape[0]:
            raise DimensionMismatch(
                f"X{X.shape}, A{A.shape} and Y{Y.shape} disagree on n")
        n = X.shape[0]
        if n < 2:
            raise TooFewRows(f"need at least 2 rows, got {n}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))
                and np.all(np.isfinite(A))):
            raise NonFinite("NaN or Inf present in X, A or Y")
        if not np.all((A == 0) | (A == 1)):
            bad = np.unique(A[(A != 0) & (A != 1)])[:5]
            raise NonBinaryTreatment(f"treatment values outside {{0,1}}: {bad}")
        if A.min() == A.max():
            raise SingleArm(f"only treatment arm {int(A[0])} is present")
        cols = self.columns
        if cols is None:
            cols = tuple(f"x{j + 1}" for j in range(X.shape[1]))
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "A", _frozen(A.astype(int), dtype=int))
        object.__setattr__(self, "Y", _frozen(Y))
        object.__setattr__(self, "columns", tuple(cols))

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    def arm(self, a):
        """Return (X, Y) restricted to treatment arm ``a``."""
        mask = self.A == a
        return self.X[mask], self.Y[mask]

    def to_rows(self):
        header = ["y", "a", *self.columns]
        rows = [[y, int(a), *x] for y, a, x in zip(self.Y, self.A, self.X)]
        return header, rows


class TargetSample(SourceSample):
    """Individual-level target data, used only for benchmark evaluation."""


def validate_dataset(raw, cls=SourceSample):
    """Validate tabular records into a :class:`SourceSample`.

    Parameters
    ----------
    raw : mapping of column name to sequence, or sequence of row mappings
        Must provide columns ``y``, ``a`` and ``x1..xp``. Extra columns are
        ignored. Covariate order follows the numeric suffix.
    cls : type
        ``SourceSample`` or ``TargetSample``.
    """
    if isinstance(raw, Mapping):
        columns = {str(k).strip().lower(): v for k, v in raw.items()}
    else:
        rows = list(raw)
        if not rows:
            raise TooFewRows("no rows")
        keys = [str(k).strip().lower() for k in rows[0].keys()]
        columns = {k: [r[orig] for r in rows]
                   for k, orig in zip(keys, rows[0].keys())}
    xcols = sorted((int(m.group(1)), k) for k in columns
                   if (m := _XCOL.match(k)))
    missing = [c for c in ("y", "a") if c not in columns]
    if missing or not xcols:
        raise MissingColumns(
            f"required columns y, a, x1..xp; missing {missing or ['x1']}")
    idx = [j for j, _ in xcols]
    if idx != list(range(1, len(idx) + 1)):
        raise MissingColumns(f"covariate columns must be x1..xp, got {idx}")

    def num(values, name):
        try:
            return np.asarray([float(v) for v in values], dtype=float)
        except (TypeError, ValueError) as exc:
            raise NonFinite(f"column {name!r} is not numeric: {exc}") from None

    X = np.column_stack([num(columns[k], k) for _, k in xcols])
    return cls(X=X, A=num(columns["a"], "a"), Y=num(columns["y"], "y"),
               columns=tuple(k for _, k in xcols))


def read_csv(path, cls=SourceSample):
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        lines = (line for line in fh if not line.startswith("#"))
        reader = csv.DictReader(lines)
        rows = list(reader)
    if not rows:
        raise TooFewRows(f"{path} has no data rows")
    return validate_dataset(rows, cls=cls)


def write_csv(sample, path):
    """Write ``y,a,x1..xp``; floats use the shortest round-trip repr."""
    header, rows = sample.to_rows()
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(r[0])), r[1], *(repr(float(v)) for v in r[2:])])


@dataclass(frozen=True)
class Moment:
    """One moment descriptor; covariate indices are 1-based.

    ``kind`` is ``"mean"`` (E X_i), ``"mean2"`` (E X_i^2) or ``"cross"``
    (E X_i X_j).
    """

    kind: str
    i: int
    j: int = None

    def __post_init__(self):
        if self.kind not in ("mean", "mean2", "cross"):
            raise UnsupportedMoment(
                f"moment kind {self.kind!r} not supported; use mean, mean2 or cross"
                " (quantile constraints are not implemented)")
        if self.kind == "cross" and self.j is None:
            raise ValidationError("cross moment needs both i and j")

    def evaluate(self, X):
        p = X.shape[1]
        for k in (self.i, self.j):
            if k is not None and not 1 <= k <= p:
                raise IndexOutOfRange(
                    f"moment {self.kind} refers to x{k} but p={p}")
        xi = X[:, self.i - 1]
        if self.kind == "mean":
            return xi
        if self.kind == "mean2":
            return xi * xi
        return xi * X[:, self.j - 1]

    def to_dict(self):
        if self.kind == "cross":
            return {"kind": "cross", "i": self.i, "j": self.j}
        return {"kind": self.kind, "index": self.i}

    @classmethod
    def from_dict(cls, d):
        kind = d.get("kind")
        if kind == "cross":
            return cls("cross", int(d["i"]), int(d["j"]))
        if "index" not in d:
            if kind not in ("mean", "mean2"):
                raise UnsupportedMoment(f"moment kind {kind!r} not supported")
            raise ValidationError(f"moment {d} lacks 'index'")
        return cls(kind, int(d["index"]))


@dataclass(frozen=True)
class ConstraintSpec:
    """Moment functions g(.) together with their target values."""

    moments: tuple
    targets: np.ndarray

    def __post_init__(self):
        moments = tuple(m if isinstance(m, Moment) else Moment.from_dict(m)
                        for m in self.moments)
        targets = np.asarray(self.targets, dtype=float).ravel()
        if len(moments) < 1:
            raise ValidationError("at least one moment constraint is required")
        if len(moments) != targets.shape[0]:
            raise DimensionMismatch(
                f"{len(moments)} moments but {targets.shape[0]} targets")
        if not np.all(np.isfinite(targets)):
            raise NonFinite("constraint targets must be finite")
        object.__setattr__(self, "moments", moments)
        object.__setattr__(self, "targets", _frozen(targets))

    @property
    def q(self):
        return len(self.moments)

    @classmethod
    def means(cls, targets, indices=None):
        """Covariate-mean constraints on ``indices`` (1-based; default all)."""
        targets = np.asarray(targets, dtype=float).ravel()
        if indices is None:
            indices = range(1, targets.shape[0] + 1)
        return cls(tuple(Moment("mean", int(i)) for i in indices), targets)

    def validate_for(self, p):
        for m in self.moments:
            for k in (m.i, m.j):
                if k is not None and not 1 <= k <= p:
                    raise IndexOutOfRange(
                        f"moment {m.kind} refers to x{k} but p={p}")

    def evaluate(self, X):
        """g(X) as an n x q matrix."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        self.validate_for(X.shape[1])
        return np.column_stack([m.evaluate(X) for m in self.moments])

    def to_dict(self):
        return {"moments": [m.to_dict() for m in self.moments],
                "targets": [float(t) for t in self.targets]}

    @classmethod
    def from_dict(cls, d):
        if "moments" not in d or "targets" not in d:
            raise ValidationError("constraint spec needs 'moments' and 'targets'")
        return cls(tuple(Moment.from_dict(m) for m in d["moments"]),
                   d["targets"])

    @classmethod
    def from_json(cls, path):
        path = Path(path)
        if not path.exists():
            raise MissingFile(f"no such file: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None


@dataclass(frozen=True)
class ConstraintMatrix:
    """Centered constraint rows g(X_i) - mu_g0."""

    G: np.ndarray

    def __post_init__(self):
        G = np.asarray(self.G, dtype=float)
        if G.ndim == 1:
            G = G[:, None]
        if G.ndim != 2 or G.shape[0] < 1 or G.shape[1] < 1:
            raise DimensionMismatch(f"constraint matrix must be 2-D, got {G.shape}")
        if not np.all(np.isfinite(G)):
            raise NonFinite("constraint matrix has non-finite entries")
        object.__setattr__(self, "G", _frozen(G))

    @property
    def n(self):
        return self.G.shape[0]

    @property
    def q(self):
        return self.G.shape[1]


def build_constraint_matrix(sample, spec):
    """Rows g(X_i) - mu_g0 for a sample (or a raw covariate matrix)."""
    X = sample.X if isinstance(sample, SourceSample) else np.asarray(sample, float)
    return ConstraintMatrix(spec.evaluate(X) - spec.targets)


@dataclass(frozen=True)
class LinearRule:
    """Linear treatment rule d(x) = 1{(1, x^T) beta > 0}, with ||beta|| = 1.

    Boundary points (score exactly 0) are assigned treatment 0.
    """

    beta: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=float).ravel()
        norm = np.linalg.norm(b)
        if b.size < 2 or not np.isfinite(norm) or norm == 0:
            raise ValidationError("rule coefficients must be finite and non-zero")
        object.__setattr__(self, "beta", _frozen(b / norm))

    @property
    def p(self):
        return self.beta.shape[0] - 1

    def decision_function(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.p:
            raise DimensionMismatch(f"rule has p={self.p}, data has {X.shape[1]}")
        return self.beta[0] + X @ self.beta[1:]

    def decide(self, X):
        return (self.decision_function(X) > 0).astype(int)

    def __neg__(self):
        return LinearRule(-self.beta)

    def to_dict(self):
        return {"beta": [float(b) for b in self.beta]}


def normalize(beta):
    beta = np.asarray(beta, dtype=float)
    return beta / np.linalg.norm(beta, axis=-1, keepdims=True)


def as_sample(X, A=None, Y=None):
    """Coerce estimator inputs to a SourceSample."""
    if isinstance(X, SourceSample):
        return X
    if A is None or Y is None:
        raise ValidationError("treatment A and outcome y are required")
    return SourceSample(X=X, A=A, Y=Y)


__all__ = [
    "ConstraintMatrix",
    "ConstraintSpec",
    "LinearRule",
    "Moment",
    "SourceSample",
    "TargetSample",
    "add_intercept",
    "as_sample",
    "build_constraint_matrix",
    "normalize",
    "read_csv",
    "validate_dataset",
    "write_csv",
]
