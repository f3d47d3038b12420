"""Tabular substrate: feature matrices, standardization, binarization, temporal means.

All types are immutable after construction and all operations are pure,
so they are safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

# The nine environmental covariates of the canonical pipeline, in file order.
CANONICAL_COLUMNS = ("ws", "ppt", "q", "def", "srad", "tmin", "tmax", "soilm", "soile")


def _as_float_matrix(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"expected a 2-D matrix, got ndim={arr.ndim}", ndim=arr.ndim)
    return arr


def _check_finite(values: np.ndarray, column_names) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise ValidationError(
            f"non-finite value at row {i}, column '{column_names[j]}'",
            row=int(i),
            column=str(column_names[j]),
        )


@dataclass(frozen=True)
class FeatureMatrix:
    """Dense row-major matrix of real covariates with named columns and row ids."""

    column_names: tuple
    values: np.ndarray
    row_ids: tuple

    def __post_init__(self):
        object.__setattr__(self, "column_names", tuple(str(c) for c in self.column_names))
        values = _as_float_matrix(self.values)
        if len(set(self.column_names)) != len(self.column_names):
            raise ValidationError("column names are not unique", columns=self.column_names)
        if values.shape[1] != len(self.column_names):
            raise ValidationError(
                f"matrix has {values.shape[1]} columns but {len(self.column_names)} names",
            )
        row_ids = tuple(self.row_ids)
        if len(row_ids) != values.shape[0]:
            raise ValidationError(
                f"{len(row_ids)} row ids for {values.shape[0]} rows",
            )
        _check_finite(values, self.column_names)
        values = np.ascontiguousarray(values)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "row_ids", row_ids)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.column_index(name)]

    def column_index(self, name: str) -> int:
        try:
            return self.column_names.index(name)
        except ValueError:
            raise ValidationError(f"unknown column '{name}'", column=name) from None

    def subset(self, mask_or_index) -> "FeatureMatrix":
        idx = np.asarray(mask_or_index)
        rows = np.arange(self.n_rows)[idx] if idx.dtype == bool else idx
        return FeatureMatrix(
            self.column_names,
            self.values[rows],
            tuple(self.row_ids[int(i)] for i in rows),
        )


@dataclass(frozen=True)
class Scaler:
    """Per-column affine scaler: subtract the mean, divide by the population std.

    Columns with zero variance are flagged; their scaled value is defined as 0
    so column alignment stays stable and callers can decide whether to drop them.
    """

    means: np.ndarray
    stds: np.ndarray
    zero_variance: np.ndarray = field(default=None)

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        stds = np.asarray(self.stds, dtype=np.float64)
        if means.shape != stds.shape or means.ndim != 1:
            raise ValidationError("scaler means/stds must be aligned 1-D vectors")
        if (stds < 0).any():
            raise ValidationError("scaler stds must be >= 0")
        zv = self.zero_variance
        zv = (stds == 0.0) if zv is None else np.asarray(zv, dtype=bool)
        for name, arr in (("means", means), ("stds", stds), ("zero_variance", zv)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_cols(self) -> int:
        return self.means.shape[0]

    def transform(self, values: np.ndarray) -> np.ndarray:
        values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        safe = np.where(self.zero_variance, 1.0, self.stds)
        out = (values - self.means) / safe
        out[:, self.zero_variance] = 0.0
        return out

    def inverse(self, scaled: np.ndarray) -> np.ndarray:
        scaled = np.atleast_2d(np.asarray(scaled, dtype=np.float64))
        return scaled * np.where(self.zero_variance, 0.0, self.stds) + self.means

    def to_dict(self) -> dict:
        return {
            "means": [float(v) for v in self.means],
            "stds": [float(v) for v in self.stds],
            "zero_variance": [bool(v) for v in self.zero_variance],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(
            np.asarray(d["means"], dtype=np.float64),
            np.asarray(d["stds"], dtype=np.float64),
            np.asarray(d["zero_variance"], dtype=bool),
        )


@dataclass(frozen=True)
class LabeledDataset:
    """Standardized covariates X, outcome y, binary treatment t, optional propensity."""

    X: FeatureMatrix
    y: np.ndarray
    t: np.ndarray
    propensity: np.ndarray = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        t = np.asarray(self.t)
        n = self.X.n_rows
        if y.shape != (n,) or t.shape != (n,):
            raise ValidationError(
                f"misaligned dataset: X has {n} rows, y {y.shape}, t {t.shape}",
            )
        if not np.isfinite(y).all():
            raise ValidationError("outcome contains non-finite values")
        if not np.isin(t, (0, 1)).all():
            raise ValidationError("treatment must contain only 0 and 1")
        t = t.astype(np.int64)
        prop = self.propensity
        if prop is not None:
            prop = np.asarray(prop, dtype=np.float64)
            if prop.shape != (n,):
                raise ValidationError("propensity vector misaligned with rows")
            if ((prop < 0) | (prop > 1)).any():
                raise ValidationError("propensity scores must lie in [0, 1]")
            prop.setflags(write=False)
        y.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "propensity", prop)

    @property
    def n_rows(self) -> int:
        return self.X.n_rows

    def with_propensity(self, scores: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.X, self.y, self.t, scores)

    def subset(self, mask_or_index) -> "LabeledDataset":
        idx = np.asarray(mask_or_index)
        rows = np.arange(self.n_rows)[idx] if idx.dtype == bool else idx
        prop = None if self.propensity is None else self.propensity[rows]
        return LabeledDataset(self.X.subset(rows), self.y[rows], self.t[rows], prop)


def derive_seed(seed: int, *tags: int) -> int:
    """Deterministic child seed for a pipeline stage, fold, or repetition.

    Distinct tag tuples give independent streams, so stages never share RNG
    state even when the user supplies the same top-level seed.
    """
    ss = np.random.SeedSequence([int(seed), *[int(t) for t in tags]])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def standardize(X: FeatureMatrix) -> tuple:
    """Center each column at its mean and divide by its population std.

    Zero-variance columns map to all-zeros and are flagged on the returned
    Scaler rather than raising, so column alignment is preserved.
    """
    if X.n_rows == 0:
        raise ValidationError("cannot standardize an empty matrix")
    means = X.values.mean(axis=0)
    stds = X.values.std(axis=0)  # population std (ddof=0)
    scaler = Scaler(means, stds)
    scaled = scaler.transform(X.values)
    return FeatureMatrix(X.column_names, scaled, X.row_ids), scaler


def median_binarize(v) -> tuple:
    """Binarize a vector at its median: 1 iff value > median, ties map to 0.

    The threshold is the usual interpolated median (even length: mean of the
    two middle order statistics).
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValidationError("median_binarize expects a nonempty 1-D vector")
    if not np.isfinite(v).all():
        i = int(np.flatnonzero(~np.isfinite(v))[0])
        raise ValidationError(f"non-finite value at position {i}", row=i)
    threshold = float(np.median(v))
    return (v > threshold).astype(np.int64), threshold


@dataclass(frozen=True)
class AggregationReport:
    """Cells dropped by the missing-year policy, with how many years each had."""

    n_kept: int
    dropped: tuple  # (cell_id, n_years_present) pairs, sorted by cell id


def temporal_aggregate(cell_ids, years, values, study_years, max_missing_fraction=0.0):
    """Average per-(cell, year) records over the study period, one row per cell.

    A cell's value is the arithmetic mean over the years it is present in.
    Cells missing more than ``max_missing_fraction`` of ``study_years`` are
    dropped and reported (the default drops a cell missing any year).
    Duplicate (cell, year) pairs are an error.
    """
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if values.shape[0] == 1 and len(cell_ids) != 1:
        values = values.T
    cell_ids = list(cell_ids)
    years = [int(y) for y in years]
    if not (len(cell_ids) == len(years) == values.shape[0]):
        raise ValidationError("cell_ids, years and values must be aligned")
    study_years = sorted(set(int(y) for y in study_years))
    if not study_years:
        raise ValidationError("study_years must be nonempty")

    seen = set()
    per_cell = {}
    for i, (cid, yr) in enumerate(zip(cell_ids, years)):
        if yr not in study_years:
            continue
        key = (cid, yr)
        if key in seen:
            raise ValidationError(f"duplicate record for cell {cid!r}, year {yr}", cell=cid, year=yr)
        seen.add(key)
        per_cell.setdefault(cid, []).append(i)

    n_years = len(study_years)
    kept_ids, kept_rows, dropped = [], [], []
    for cid in sorted(per_cell):
        rows = per_cell[cid]
        missing = (n_years - len(rows)) / n_years
        if missing > max_missing_fraction:
            dropped.append((cid, len(rows)))
        else:
            kept_ids.append(cid)
            kept_rows.append(values[rows].mean(axis=0))

    agg = np.vstack(kept_rows) if kept_rows else np.empty((0, values.shape[1]))
    return kept_ids, agg, AggregationReport(len(kept_ids), tuple(dropped))
