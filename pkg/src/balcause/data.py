"""Containers for observational data and estimator outputs, plus CSV I/O."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    EmptyFile,
    InvalidDataset,
    LevelOutOfRange,
    MissingColumn,
    NonNumericCell,
)


@dataclass(frozen=True)
class TreatmentSpace:
    """Either ``K + 1`` categorical levels or a dose interval ``[lo, hi]``."""

    kind: str
    K: Optional[int] = None
    lo: Optional[float] = None
    hi: Optional[float] = None

    def __post_init__(self):
        if self.kind == "categorical":
            if self.K is None or self.K < 1:
                raise ValueError("categorical treatment space needs K >= 1")
        elif self.kind == "continuous":
            if self.lo is None or self.hi is None or not self.lo < self.hi:
                raise ValueError("continuous treatment space needs lo < hi")
        else:
            raise ValueError(f"unknown treatment kind {self.kind!r}")

    @classmethod
    def categorical(cls, K: int) -> "TreatmentSpace":
        return cls("categorical", K=int(K))

    @classmethod
    def continuous(cls, lo: float, hi: float) -> "TreatmentSpace":
        return cls("continuous", lo=float(lo), hi=float(hi))

    @property
    def is_categorical(self) -> bool:
        return self.kind == "categorical"


@dataclass(frozen=True)
class DoseTransform:
    """Affine rescaling ``a = (raw - shift) / scale`` applied at load time."""

    shift: float = 0.0
    scale: float = 1.0

    def forward(self, raw):
        return (np.asarray(raw, dtype=float) - self.shift) / self.scale

    def inverse(self, a):
        return np.asarray(a, dtype=float) * self.scale + self.shift


# --- validation findings -------------------------------------------------


@dataclass(frozen=True)
class NonFinite:
    row: int
    field: str

    def __str__(self):
        return f"NonFinite(row {self.row}, {self.field!r})"


@dataclass(frozen=True)
class EmptyLevel:
    level: int

    def __str__(self):
        return f"EmptyLevel({self.level})"


@dataclass(frozen=True)
class BadLevel:
    row: int
    value: float

    def __str__(self):
        return f"BadLevel(row {self.row}, value {self.value})"


@dataclass(frozen=True)
class DoseOutOfRange:
    row: int
    value: float

    def __str__(self):
        return f"DoseOutOfRange(row {self.row}, value {self.value})"


@dataclass(frozen=True)
class DegenerateDoses:
    def __str__(self):
        return "DegenerateDoses(min dose == max dose)"


@dataclass(frozen=True)
class ShapeMismatch:
    detail: str

    def __str__(self):
        return f"ShapeMismatch({self.detail})"


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable ``(treatment, outcome, covariates)`` table.

    Arrays are copied and marked read-only on construction, so a Dataset can be
    shared freely between estimator calls.
    """

    treatment: np.ndarray
    outcome: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple = ()
    intercept: bool = False
    dose_transform: Optional[DoseTransform] = None

    def __post_init__(self):
        object.__setattr__(self, "treatment", _frozen(self.treatment).reshape(-1))
        object.__setattr__(self, "outcome", _frozen(self.outcome).reshape(-1))
        cov = _frozen(self.covariates)
        if cov.ndim == 1:
            cov = cov.reshape(-1, 1)
        object.__setattr__(self, "covariates", cov)
        if not self.covariate_names:
            names = tuple(f"x{j + 1}" for j in range(cov.shape[1]))
            object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.treatment.shape[0]

    @property
    def d(self) -> int:
        return self.covariates.shape[1]

    def levels(self) -> np.ndarray:
        return self.treatment.astype(int)

    def with_covariates(self, covariates, names=()) -> "Dataset":
        """Same units and outcomes, different covariate matrix."""
        return Dataset(self.treatment, self.outcome, covariates, tuple(names),
                       self.intercept, self.dose_transform)

    def take(self, index) -> "Dataset":
        return Dataset(self.treatment[index], self.outcome[index],
                       self.covariates[index], self.covariate_names,
                       self.intercept, self.dose_transform)


def validate(ds: Dataset, space: TreatmentSpace) -> list:
    """Return every invariant violation of ``ds`` for ``space`` (empty when valid)."""
    problems = []
    n = ds.treatment.shape[0]
    if n < 1:
        problems.append(ShapeMismatch("no rows"))
        return problems
    if ds.outcome.shape[0] != n or ds.covariates.shape[0] != n:
        problems.append(ShapeMismatch(
            f"treatment has {n} rows, outcome {ds.outcome.shape[0]}, "
            f"covariates {ds.covariates.shape[0]}"))
        return problems

    for name, arr in (("treatment", ds.treatment), ("outcome", ds.outcome)):
        for i in np.flatnonzero(~np.isfinite(arr)):
            problems.append(NonFinite(int(i), name))
    bad_rows = np.flatnonzero(~np.isfinite(ds.covariates).all(axis=1))
    for i in bad_rows:
        for j in np.flatnonzero(~np.isfinite(ds.covariates[i])):
            problems.append(NonFinite(int(i), ds.covariate_names[j]))

    a = ds.treatment
    finite = np.isfinite(a)
    if space.is_categorical:
        is_level = finite & (a == np.round(a)) & (a >= 0) & (a <= space.K)
        for i in np.flatnonzero(finite & ~is_level):
            problems.append(BadLevel(int(i), float(a[i])))
        present = set(a[is_level].astype(int).tolist())
        for k in range(space.K + 1):
            if k not in present:
                problems.append(EmptyLevel(k))
    else:
        outside = finite & ((a < space.lo) | (a > space.hi))
        for i in np.flatnonzero(outside):
            problems.append(DoseOutOfRange(int(i), float(a[i])))
        if finite.any() and a[finite].min() == a[finite].max():
            problems.append(DegenerateDoses())
    return problems


def check(ds: Dataset, space: TreatmentSpace) -> Dataset:
    problems = validate(ds, space)
    if problems:
        raise InvalidDataset(problems)
    return ds


@dataclass(frozen=True)
class Schema:
    """Column roles for :func:`load_csv`."""

    treatment: str
    outcome: str
    covariates: Sequence[str]
    intercept: bool = False
    dose_transform: Optional[DoseTransform] = None


def _parse(value: str, row: int, col: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise NonNumericCell(row, col, value) from None


def load_csv(path, schema: Schema, space: TreatmentSpace) -> Dataset:
    """Read a header-first, comma-separated UTF-8 file into a validated Dataset.

    Row numbers in errors are zero-based data rows (the header is not counted).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyFile(f"{path} is empty")
        header = [h.strip() for h in header]
        wanted = [schema.treatment, schema.outcome, *schema.covariates]
        if not schema.covariates:
            raise MissingColumn("<at least one covariate>")
        for col in wanted:
            if col not in header:
                raise MissingColumn(col)
        pos = [header.index(c) for c in wanted]
        rows = []
        for r, line in enumerate(reader):
            if not line or all(not cell.strip() for cell in line):
                continue
            rows.append([_parse(line[p].strip(), r, wanted[j])
                         for j, p in enumerate(pos)])
    if not rows:
        raise EmptyFile(f"{path} has a header but no data rows")

    table = np.asarray(rows, dtype=float)
    a = table[:, 0]
    if space.is_categorical:
        for i, v in enumerate(a):
            if math.isfinite(v) and (v != round(v) or v < 0 or v > space.K):
                raise LevelOutOfRange(i, v, space.K)
    elif schema.dose_transform is not None:
        a = schema.dose_transform.forward(a)

    x = table[:, 2:]
    names = tuple(schema.covariates)
    if schema.intercept:
        x = np.column_stack([np.ones(len(x)), x])
        names = ("intercept",) + names
    ds = Dataset(a, table[:, 1], x, names, schema.intercept, schema.dose_transform)
    return check(ds, space)


def write_csv(ds: Dataset, path, schema: Optional[Schema] = None) -> None:
    """Write ``ds`` so that :func:`load_csv` with ``schema`` reads it back.

    Floats are written with ``repr`` so the numeric payload survives exactly
    (up to the dose back-transform, when one is recorded).
    """
    names = list(ds.covariate_names)
    x = ds.covariates
    if ds.intercept:
        x = x[:, 1:]
        names = names[1:]
    if schema is None:
        schema = Schema("a", "y", names, ds.intercept, ds.dose_transform)
    a = ds.treatment
    if ds.dose_transform is not None:
        a = ds.dose_transform.inverse(a)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([schema.treatment, schema.outcome, *schema.covariates])
        for i in range(ds.n):
            w.writerow([repr(float(a[i])), repr(float(ds.outcome[i]))]
                       + [repr(float(v)) for v in x[i]])


# --- estimator outputs ---------------------------------------------------


@dataclass
class CategoricalFit:
    beta_hat: np.ndarray
    theta_hat: np.ndarray
    sigma_hat: Optional[np.ndarray] = None
    gmm_objective_at_solution: float = float("nan")
    converged: bool = False
    iterations: int = 0
    max_abs_moment: float = float("nan")
    clamp_count: int = 0
    layout: str = ""
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "beta_hat": np.asarray(self.beta_hat).tolist(),
            "beta_layout": self.layout,
            "theta_hat": np.asarray(self.theta_hat).tolist(),
            "sigma_hat": (None if self.sigma_hat is None
                          else np.asarray(self.sigma_hat).reshape(-1).tolist()),
            "gmm_objective_at_solution": float(self.gmm_objective_at_solution),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "max_abs_moment": float(self.max_abs_moment),
            "clamp_count": int(self.clamp_count),
        }
        out.update(self.diagnostics)
        return out


@dataclass
class DoseResponseCurve:
    grid: np.ndarray
    theta: np.ndarray
    variance: np.ndarray
    band_lo: np.ndarray
    band_hi: np.ndarray
    h: float
    l: float
    estimator_kind: str
    kernel: str = "epanechnikov"
    beta_hat: Optional[np.ndarray] = None
    clamp_count: int = 0
    fallback_points: int = 0
    dose_transform: Optional[DoseTransform] = None
    converged: bool = True
    variance_form: str = "ratio"

    def rows(self):
        """``(a, theta, variance, lo, hi)`` tuples on the original dose scale."""
        a = self.grid if self.dose_transform is None else self.dose_transform.inverse(self.grid)
        return list(zip(a, self.theta, self.variance, self.band_lo, self.band_hi))

    def metadata(self) -> dict:
        return {
            "h": float(self.h),
            "l": float(self.l),
            "estimator_kind": self.estimator_kind,
            "kernel": self.kernel,
            "clamp_count": int(self.clamp_count),
            "fallback_points": int(self.fallback_points),
            "converged": bool(self.converged),
            "variance_form": self.variance_form,
            "beta_hat": None if self.beta_hat is None else np.asarray(self.beta_hat).tolist(),
            "dose_transform": (None if self.dose_transform is None else
                               {"shift": self.dose_transform.shift,
                                "scale": self.dose_transform.scale}),
        }
