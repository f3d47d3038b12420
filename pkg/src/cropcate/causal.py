"""Double machine learning engine for heterogeneous treatment effects.

Pipeline: out-of-fold propensity scores -> overlap trimming -> K-fold
cross-fitted residualization of outcome and treatment -> linear final stage
``theta(x) = a + <b, x>`` fit by least squares of the outcome residuals on
``t_res * [1, x]``, with HC1 heteroskedasticity-robust covariance and normal
inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.linalg import qr, solve_triangular

from .core import FeatureMatrix, LabeledDataset, Scaler, derive_seed
from .errors import (
    NoOverlapError,
    RankDeficientError,
    SingleClassError,
    ValidationError,
)
from .learners import (
    BoostParams,
    ForestParams,
    LearnerSpec,
    cross_validate,
    f1_score,
    fit_gradient_boosted_classifier,
    kfold_indices,
    r2_score,
)

# two-sided 95% normal critical value, fixed so CI widths are reproducible
Z95 = 1.959964

_STAGE_PROPENSITY = 1
_STAGE_OUTCOME = 2
_STAGE_TREATMENT = 3
_STAGE_DIAGNOSTIC = 4


@dataclass(frozen=True)
class EffectEstimate:
    """Point estimate with normal-approximation inference."""

    point: float
    std_error: float
    ci_low: float
    ci_high: float
    p_value: float

    @classmethod
    def from_point_se(cls, point: float, std_error: float) -> "EffectEstimate":
        point = float(point)
        std_error = float(std_error)
        if not math.isfinite(point) or not math.isfinite(std_error) or std_error < 0:
            raise ValidationError("invalid point/SE pair", point=point,
                                  std_error=std_error)
        if std_error == 0.0:
            p = 1.0 if point == 0.0 else 0.0
        else:
            p = math.erfc(abs(point) / std_error / math.sqrt(2.0))
        return cls(point, std_error, point - Z95 * std_error,
                   point + Z95 * std_error, p)


@dataclass(frozen=True)
class ResidualSet:
    """Out-of-fold residuals: each row was held out of the models scoring it."""

    y_res: np.ndarray
    t_res: np.ndarray
    fold_id: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y_res, dtype=np.float64)
        t = np.asarray(self.t_res, dtype=np.float64)
        f = np.asarray(self.fold_id, dtype=np.int64)
        if not (y.shape == t.shape == f.shape) or y.ndim != 1 or y.size == 0:
            raise ValidationError("residual vectors must be aligned and nonempty")
        if not (np.isfinite(y).all() and np.isfinite(t).all()):
            raise ValidationError("residuals contain non-finite values")
        for name, arr in (("y_res", y), ("t_res", t), ("fold_id", f)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_rows(self) -> int:
        return self.y_res.shape[0]


@dataclass(frozen=True)
class TrimReport:
    """Outcome of overlap trimming, per treatment arm."""

    lo: float
    hi: float
    kept_treated: int
    kept_control: int
    removed_treated: int
    removed_control: int
    kept_indices: np.ndarray

    @property
    def n_kept(self) -> int:
        return self.kept_treated + self.kept_control

    @property
    def n_removed(self) -> int:
        return self.removed_treated + self.removed_control


@dataclass(frozen=True)
class LinearCateModel:
    """theta(x) = intercept + <beta, x> over standardized covariates.

    ``covariance`` is the robust covariance of (intercept, beta) in that
    order. ``scaler`` maps raw covariates onto the model's scale.
    """

    intercept: float
    beta: np.ndarray
    covariance: np.ndarray
    feature_names: tuple
    n_rows: int
    scaler: Optional[Scaler] = None

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        cov = np.asarray(self.covariance, dtype=np.float64)
        p = beta.shape[0]
        if beta.ndim != 1 or cov.shape != (p + 1, p + 1):
            raise ValidationError("beta/covariance dimensions disagree",
                                  beta=beta.shape, covariance=cov.shape)
        if np.abs(cov - cov.T).max() > 1e-9:
            raise ValidationError("covariance is not symmetric")
        names = tuple(str(c) for c in self.feature_names)
        if len(names) != p:
            raise ValidationError("feature names misaligned with beta",
                                  names=len(names), beta=p)
        if self.scaler is not None and self.scaler.n_cols != p:
            raise ValidationError("scaler width disagrees with beta",
                                  scaler=self.scaler.n_cols, beta=p)
        beta.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "intercept", float(self.intercept))
        object.__setattr__(self, "n_rows", int(self.n_rows))

    @property
    def n_features(self) -> int:
        return self.beta.shape[0]

    def theta(self, X_std) -> np.ndarray:
        """Effect surface over standardized covariate rows."""
        X = _covariate_values(X_std, self.n_features)
        return self.intercept + X @ self.beta


def _covariate_values(X, expected_cols: Optional[int] = None) -> np.ndarray:
    values = X.values if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=np.float64)
    if values.ndim != 2:
        raise ValidationError("covariates must be a 2-D matrix",
                              shape=tuple(values.shape))
    if expected_cols is not None and values.shape[1] != expected_cols:
        raise ValidationError("covariate width mismatch",
                              expected=expected_cols, got=values.shape[1])
    return values


# ---------------------------------------------------------------------------
# propensity and trimming
# ---------------------------------------------------------------------------


def estimate_propensity(X, t, *, params: Optional[BoostParams] = None,
                        k: int = 3, seed: int = 0) -> np.ndarray:
    """Out-of-fold P(T=1|X) from a gradient-boosted classifier.

    Every unit is scored by a model that never saw it in training, using the
    same K as the DML cross-fitting.
    """
    X = _covariate_values(X)
    t = np.asarray(t, dtype=np.float64)
    if t.shape != (X.shape[0],):
        raise ValidationError("treatment vector misaligned with X")
    if np.unique(t).size < 2:
        raise SingleClassError("both treatment groups must be nonempty")
    params = params or BoostParams()
    scores = np.empty(X.shape[0], dtype=np.float64)
    for fold, (train, test) in enumerate(kfold_indices(X.shape[0], k, seed)):
        if np.unique(t[train]).size < 2:
            raise SingleClassError(
                "a cross-fitting fold saw a single treatment class; "
                "use fewer folds or more data", fold=fold)
        model = fit_gradient_boosted_classifier(
            X[train], t[train], params=params,
            seed=derive_seed(seed, _STAGE_PROPENSITY, fold))
        scores[test] = model.predict_proba(X[test])
    return scores


def trim_overlap(dataset: LabeledDataset, scores, lo: float = 0.2,
                 hi: float = 0.8) -> tuple:
    """Keep rows whose propensity satisfies lo <= score <= hi (inclusive).

    Returns the trimmed dataset (with the kept scores attached) and a
    TrimReport with per-arm kept/removed counts.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (dataset.n_rows,):
        raise ValidationError("scores misaligned with dataset rows",
                              rows=dataset.n_rows, scores=scores.shape)
    if not np.isfinite(scores).all():
        raise ValidationError("propensity scores contain non-finite values")
    if not 0.0 <= lo <= hi <= 1.0:
        raise ValidationError("need 0 <= lo <= hi <= 1", lo=lo, hi=hi)
    keep = (scores >= lo) & (scores <= hi)
    kept_indices = np.flatnonzero(keep)
    if kept_indices.size == 0:
        raise NoOverlapError("no overlap region: every row was trimmed",
                             lo=lo, hi=hi, rows=dataset.n_rows)
    t = dataset.t
    report = TrimReport(
        lo=float(lo), hi=float(hi),
        kept_treated=int(np.sum(keep & (t == 1))),
        kept_control=int(np.sum(keep & (t == 0))),
        removed_treated=int(np.sum(~keep & (t == 1))),
        removed_control=int(np.sum(~keep & (t == 0))),
        kept_indices=kept_indices,
    )
    trimmed = dataset.subset(kept_indices).with_propensity(scores[kept_indices])
    return trimmed, report


# ---------------------------------------------------------------------------
# cross-fitted residualization
# ---------------------------------------------------------------------------


def cross_fit_residuals(dataset: LabeledDataset, *, k: int = 3,
                        y_spec: Optional[LearnerSpec] = None,
                        t_spec: Optional[LearnerSpec] = None,
                        seed: int = 0, threads: int = 1) -> ResidualSet:
    """Out-of-fold residuals of outcome and treatment against the covariates.

    For each fold, a regression learner for E[Y|X] and a classification
    learner for P(T=1|X) are fit on the other folds, then applied to the
    held-out fold: y_res = y - E[Y|X], t_res = t - P(T=1|X).
    """
    y_spec = y_spec or LearnerSpec(task="regression")
    t_spec = t_spec or LearnerSpec(task="classification")
    if y_spec.task != "regression" or t_spec.task != "classification":
        raise ValidationError("y_spec must be regression and t_spec classification",
                              y_task=y_spec.task, t_task=t_spec.task)
    X = dataset.X.values
    y = dataset.y
    t = dataset.t.astype(np.float64)
    n = dataset.n_rows
    y_res = np.empty(n, dtype=np.float64)
    t_res = np.empty(n, dtype=np.float64)
    fold_id = np.empty(n, dtype=np.int64)
    for fold, (train, test) in enumerate(kfold_indices(n, k, seed)):
        if np.unique(t[train]).size < 2:
            raise SingleClassError(
                "a cross-fitting fold saw a single treatment class; "
                "use fewer folds or more data", fold=fold)
        y_model = y_spec.fit(X[train], y[train], threads=threads,
                             seed=derive_seed(seed, _STAGE_OUTCOME, fold))
        t_model = t_spec.fit(X[train], t[train], threads=threads,
                             seed=derive_seed(seed, _STAGE_TREATMENT, fold))
        y_res[test] = y[test] - y_model.predict(X[test])
        t_res[test] = t[test] - t_model.predict_proba(X[test])
        fold_id[test] = fold
    return ResidualSet(y_res, t_res, fold_id)


# ---------------------------------------------------------------------------
# linear final stage
# ---------------------------------------------------------------------------


def fit_linear_cate(residuals: ResidualSet, X, *,
                    scaler: Optional[Scaler] = None) -> LinearCateModel:
    """Least squares of y_res on t_res * [1, x] with HC1 robust covariance.

    The design is factored by a rank-revealing pivoted QR; a rank-deficient
    design raises RankDeficientError naming the collinear columns.
    """
    values = _covariate_values(X)
    names = (X.column_names if isinstance(X, FeatureMatrix)
             else tuple(f"x{j}" for j in range(values.shape[1])))
    n, p = values.shape
    if residuals.n_rows != n:
        raise ValidationError("residuals misaligned with covariates",
                              residuals=residuals.n_rows, rows=n)
    if n <= p + 1:
        raise ValidationError("need more rows than final-stage coefficients",
                              rows=n, coefficients=p + 1)
    z = np.empty((n, p + 1), dtype=np.float64)
    z[:, 0] = residuals.t_res
    z[:, 1:] = residuals.t_res[:, None] * values

    Q, R, piv = qr(z, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(n, p + 1) * np.finfo(np.float64).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < p + 1:
        labels = ["intercept"] + list(names)
        dropped = sorted(labels[j] for j in piv[rank:])
        raise RankDeficientError(
            "final-stage design is rank deficient; collinear columns: "
            + ", ".join(dropped), columns=tuple(dropped))

    w = solve_triangular(R, Q.T @ residuals.y_res)
    coef = np.empty(p + 1, dtype=np.float64)
    coef[piv] = w

    u = residuals.y_res - z @ coef
    meat = (z * (u * u)[:, None]).T @ z
    r_inv = solve_triangular(R, np.eye(p + 1))
    m_inv = np.empty((p + 1, p + 1), dtype=np.float64)
    m_inv[np.ix_(piv, piv)] = r_inv @ r_inv.T
    cov = m_inv @ meat @ m_inv * (n / (n - p - 1))
    cov = (cov + cov.T) / 2.0

    return LinearCateModel(intercept=float(coef[0]), beta=coef[1:].copy(),
                           covariance=cov, feature_names=names, n_rows=n,
                           scaler=scaler)


# ---------------------------------------------------------------------------
# effect queries
# ---------------------------------------------------------------------------


def _quadratic_se(cov: np.ndarray, v: np.ndarray) -> float:
    var = float(v @ cov @ v)
    return math.sqrt(max(var, 0.0))


def cate(model: LinearCateModel, x_raw) -> EffectEstimate:
    """Effect at one raw covariate vector (standardized via the model scaler)."""
    if model.scaler is None:
        raise ValidationError("model carries no scaler; pass standardized "
                              "covariates to cate_batch instead")
    x_raw = np.asarray(x_raw, dtype=np.float64)
    if x_raw.shape != (model.n_features,):
        raise ValidationError("covariate vector has the wrong length",
                              expected=model.n_features, got=tuple(x_raw.shape))
    x_std = model.scaler.transform(x_raw)[0]
    v = np.concatenate(([1.0], x_std))
    point = float(v[1:] @ model.beta) + model.intercept
    return EffectEstimate.from_point_se(point, _quadratic_se(model.covariance, v))


def cate_batch(model: LinearCateModel, X_std) -> tuple:
    """Per-row effects and SEs over standardized covariate rows."""
    X = _covariate_values(X_std, model.n_features)
    V = np.hstack([np.ones((X.shape[0], 1)), X])
    points = V @ np.concatenate(([model.intercept], model.beta))
    variances = np.einsum("ij,jk,ik->i", V, model.covariance, V)
    return points, np.sqrt(np.maximum(variances, 0.0))


@dataclass(frozen=True)
class AteSummary:
    """Average effect over an analysis population."""

    estimate: EffectEstimate
    n_rows: int
    pct_of_mean_outcome: Optional[float] = None


def ate(model: LinearCateModel, X_std, *,
        mean_outcome: Optional[float] = None) -> AteSummary:
    """Average effect: by linearity, theta evaluated at the covariate mean.

    SE comes from the delta method with v = [1, mean(x)]. When
    ``mean_outcome`` is given, the point is also expressed as a percentage
    of it.
    """
    X = _covariate_values(X_std, model.n_features)
    if X.shape[0] == 0:
        raise ValidationError("analysis population is empty")
    x_bar = X.mean(axis=0)
    v = np.concatenate(([1.0], x_bar))
    point = model.intercept + float(x_bar @ model.beta)
    est = EffectEstimate.from_point_se(point, _quadratic_se(model.covariance, v))
    pct = None
    if mean_outcome is not None:
        if mean_outcome == 0:
            raise ValidationError("mean outcome is zero; percentage undefined")
        pct = 100.0 * est.point / float(mean_outcome)
    return AteSummary(estimate=est, n_rows=X.shape[0], pct_of_mean_outcome=pct)


@dataclass(frozen=True)
class RawCoefficients:
    """The linear effect surface mapped back to raw covariate units."""

    intercept: float
    intercept_se: float
    slopes: np.ndarray
    slope_ses: np.ndarray
    feature_names: tuple


def raw_coefficients(model: LinearCateModel) -> RawCoefficients:
    """Undo standardization: slope_j = beta_j / std_j, delta-method SEs.

    Zero-variance columns have no raw slope; they come back as NaN.
    """
    if model.scaler is None:
        raise ValidationError("model carries no scaler")
    stds = model.scaler.stds
    means = model.scaler.means
    zv = model.scaler.zero_variance
    safe = np.where(zv, np.nan, stds)
    slopes = model.beta / safe
    cov = model.covariance
    slope_ses = np.sqrt(np.maximum(np.diag(cov)[1:], 0.0)) / safe
    # raw intercept a - sum_j beta_j mu_j / sigma_j; v maps (a, beta) onto it
    v = np.concatenate(([1.0], np.where(zv, 0.0, -means / np.where(zv, 1.0, stds))))
    intercept = float(v[1:] @ model.beta) + model.intercept
    return RawCoefficients(intercept=intercept,
                           intercept_se=_quadratic_se(cov, v),
                           slopes=slopes, slope_ses=np.abs(slope_ses),
                           feature_names=model.feature_names)


# ---------------------------------------------------------------------------
# end-to-end pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DmlResult:
    """Everything produced by one DML run on a labeled dataset."""

    model: LinearCateModel
    residuals: ResidualSet
    trim: TrimReport
    dataset: LabeledDataset  # trimmed rows, propensity attached
    propensity_all: np.ndarray
    orthogonality_gap: float  # max |sum z_i u_i| / ||y_res||_2


@dataclass(frozen=True)
class EstimatorConfig:
    """Hyperparameters of one full DML run."""

    k: int = 3
    trim_lo: float = 0.2
    trim_hi: float = 0.8
    y_forest: ForestParams = ForestParams()
    t_forest: ForestParams = ForestParams()
    propensity: BoostParams = BoostParams()

    def run(self, dataset: LabeledDataset, scaler: Optional[Scaler] = None, *,
            seed: int = 0, threads: int = 1) -> "DmlResult":
        y_spec = LearnerSpec(task="regression", forest=self.y_forest)
        t_spec = LearnerSpec(task="classification", forest=self.t_forest)
        return run_dml(dataset, scaler, k=self.k, trim_lo=self.trim_lo,
                       trim_hi=self.trim_hi, y_spec=y_spec, t_spec=t_spec,
                       prop_params=self.propensity, seed=seed, threads=threads)


def run_dml(dataset: LabeledDataset, scaler: Optional[Scaler] = None, *,
            k: int = 3, trim_lo: float = 0.2, trim_hi: float = 0.8,
            y_spec: Optional[LearnerSpec] = None,
            t_spec: Optional[LearnerSpec] = None,
            prop_params: Optional[BoostParams] = None,
            seed: int = 0, threads: int = 1) -> DmlResult:
    """Propensity, trimming, cross-fitting, and the linear final stage."""
    scores = estimate_propensity(dataset.X, dataset.t, params=prop_params,
                                 k=k, seed=derive_seed(seed, _STAGE_PROPENSITY))
    trimmed, trim_report = trim_overlap(dataset, scores, trim_lo, trim_hi)
    residuals = cross_fit_residuals(trimmed, k=k, y_spec=y_spec, t_spec=t_spec,
                                    seed=derive_seed(seed, _STAGE_OUTCOME),
                                    threads=threads)
    model = fit_linear_cate(residuals, trimmed.X, scaler=scaler)
    z = np.hstack([residuals.t_res[:, None],
                   residuals.t_res[:, None] * trimmed.X.values])
    u = residuals.y_res - z @ np.concatenate(([model.intercept], model.beta))
    y_norm = float(np.linalg.norm(residuals.y_res))
    gap = float(np.abs(z.T @ u).max() / y_norm) if y_norm > 0 else 0.0
    return DmlResult(model=model, residuals=residuals, trim=trim_report,
                     dataset=trimmed, propensity_all=scores,
                     orthogonality_gap=gap)


@dataclass(frozen=True)
class DiagnosticRow:
    """Train/test scores for one first-stage model."""

    name: str  # "outcome" or "treatment"
    metric: str  # "r2" or "f1"
    train_score: float  # K-fold CV mean inside the 80% split
    test_score: float  # refit on the 80% split, scored on the held-out 20%


@dataclass(frozen=True)
class FirstStageDiagnostic:
    """Overfitting check run before the causal stages."""

    rows: tuple
    n_train: int
    n_test: int
    k: int


def first_stage_diagnostic(dataset: LabeledDataset, *, k: int = 3,
                           y_spec: Optional[LearnerSpec] = None,
                           t_spec: Optional[LearnerSpec] = None,
                           seed: int = 0,
                           threads: int = 1) -> FirstStageDiagnostic:
    """Score both first-stage models on a fixed 80/20 split.

    The "train" column is the K-fold cross-validated score inside the 80%
    split; the "test" column refits on the full 80% and scores the held-out
    20%. A small train-test gap indicates the learners generalize well
    enough to enter cross-fitting.
    """
    y_spec = y_spec or LearnerSpec(task="regression")
    t_spec = t_spec or LearnerSpec(task="classification")
    n = dataset.y.shape[0]
    if n < 10:
        raise ValidationError("diagnostic split needs at least 10 rows",
                              n_rows=n)
    rng = np.random.default_rng(derive_seed(seed, _STAGE_DIAGNOSTIC))
    perm = rng.permutation(n)
    n_test = max(1, int(round(0.2 * n)))
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    X_train = dataset.X.values[train_idx]
    X_test = dataset.X.values[test_idx]
    rows = []
    specs = (("outcome", y_spec, dataset.y, "r2"),
             ("treatment", t_spec, dataset.t, "f1"))
    for idx, (name, spec, target, metric) in enumerate(specs):
        target_train = target[train_idx]
        target_test = target[test_idx]
        cv = cross_validate(spec, X_train, target_train, k=k,
                            seed=derive_seed(seed, _STAGE_DIAGNOSTIC, idx, 1),
                            threads=threads)
        refit = spec.fit(X_train, target_train,
                         seed=derive_seed(seed, _STAGE_DIAGNOSTIC, idx, 2),
                         threads=threads)
        pred = refit.predict(X_test)
        if metric == "r2":
            test_score = r2_score(target_test, pred)
        else:
            test_score = f1_score(target_test, pred)
        rows.append(DiagnosticRow(name=name, metric=metric,
                                  train_score=float(cv.mean_score),
                                  test_score=float(test_score)))
    return FirstStageDiagnostic(rows=tuple(rows),
                                n_train=int(train_idx.shape[0]),
                                n_test=int(n_test), k=k)
