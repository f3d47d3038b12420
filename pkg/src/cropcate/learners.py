"""First-stage learners: CART trees, random forests, gradient boosting.

All tree growth goes through :mod:`cropcate.kernels`, so every learner here
inherits the kernels' determinism guarantees: same seed gives the same model
regardless of thread count or of which kernel implementation is active.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import SingleClassError, ValidationError

MODEL_FORMAT = "cropcate-model"
MODEL_VERSION = 1

PROB_CLIP = 1e-6

_CRITERION_NAMES = {
    kernels.CRITERION_VARIANCE: "variance",
    kernels.CRITERION_GINI: "gini",
}
_CRITERION_CODES = {v: k for k, v in _CRITERION_NAMES.items()}


# ---------------------------------------------------------------------------
# trees
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TreeNode:
    """Recursive view of one node; ``split_feature is None`` marks a leaf."""

    split_feature: Optional[int]
    split_threshold: Optional[float]
    left: Optional["TreeNode"]
    right: Optional["TreeNode"]
    leaf_value: float
    leaf_count: int

    @property
    def is_leaf(self) -> bool:
        return self.split_feature is None


class Tree:
    """A fitted CART tree stored as flat node arrays.

    ``value`` holds the training-target mean of every node (for leaves this
    is the prediction; for classification it is the class-1 fraction).
    Rows with ``x[feature] <= threshold`` go left.
    """

    __slots__ = ("feature", "threshold", "left", "right", "value", "count",
                 "criterion")

    def __init__(self, feature, threshold, left, right, value, count,
                 criterion: str):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=np.float64)
        self.count = np.asarray(count, dtype=np.int64)
        if criterion not in _CRITERION_CODES:
            raise ValidationError("unknown tree criterion", criterion=criterion)
        self.criterion = criterion

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature == kernels.NO_FEATURE))

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node id reached by each row."""
        return kernels.apply_tree(self.feature, self.threshold, self.left,
                                  self.right, np.asarray(X, dtype=np.float64))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    @property
    def root(self) -> TreeNode:
        return self._node(0)

    def _node(self, i: int) -> TreeNode:
        if self.feature[i] == kernels.NO_FEATURE:
            return TreeNode(None, None, None, None,
                            float(self.value[i]), int(self.count[i]))
        return TreeNode(int(self.feature[i]), float(self.threshold[i]),
                        self._node(int(self.left[i])),
                        self._node(int(self.right[i])),
                        float(self.value[i]), int(self.count[i]))

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion,
            "feature": self.feature.tolist(),
            "threshold": [None if math.isnan(t) else t for t in self.threshold],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "count": self.count.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        thr = np.array([np.nan if t is None else float(t) for t in d["threshold"]],
                       dtype=np.float64)
        return cls(d["feature"], thr, d["left"], d["right"], d["value"],
                   d["count"], d["criterion"])


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise ValidationError("X must be a non-empty 2-D array",
                              shape=tuple(X.shape))
    if not np.isfinite(X).all():
        raise ValidationError("X contains non-finite values")
    return X


def _as_targets(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or y.shape[0] != n:
        raise ValidationError("targets must be 1-D and aligned with X",
                              expected=n, got=tuple(y.shape))
    if not np.isfinite(y).all():
        raise ValidationError("targets contain non-finite values")
    return y


def _check_binary(t: np.ndarray, what: str) -> np.ndarray:
    vals = np.unique(t)
    if not np.isin(vals, (0.0, 1.0)).all():
        raise ValidationError(f"{what} must be binary 0/1",
                              values=vals[:8].tolist())
    return t


def fit_tree(X, y, *, criterion: str, max_depth: int = 12,
             min_leaf_size: int = 5, max_features: Optional[int] = None,
             samples: Optional[np.ndarray] = None, feat_seed: int = 0) -> Tree:
    """Grow a single CART tree (criterion ``"variance"`` or ``"gini"``)."""
    X = _as_matrix(X)
    y = _as_targets(y, X.shape[0])
    if criterion not in _CRITERION_CODES:
        raise ValidationError("unknown tree criterion", criterion=criterion)
    if criterion == "gini":
        _check_binary(y, "classification targets")
    # max_depth 0 is allowed and yields a single-leaf tree
    if max_depth < 0 or min_leaf_size < 1:
        raise ValidationError("max_depth must be >= 0 and min_leaf_size >= 1",
                              max_depth=max_depth, min_leaf_size=min_leaf_size)
    p = X.shape[1]
    if max_features is None:
        max_features = p
    if not 1 <= max_features <= p:
        raise ValidationError("max_features out of range",
                              max_features=max_features, n_features=p)
    if samples is None:
        samples = np.arange(X.shape[0], dtype=np.int64)
    if samples.shape[0] < 2 * min_leaf_size:
        raise ValidationError("need at least 2*min_leaf_size rows",
                              rows=int(samples.shape[0]),
                              min_leaf_size=min_leaf_size)
    arrays = kernels.build_tree(X, y, samples, _CRITERION_CODES[criterion],
                                max_depth, min_leaf_size, max_features,
                                feat_seed)
    return Tree(*arrays, criterion=criterion)


# ---------------------------------------------------------------------------
# random forest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 200
    max_depth: int = 12
    min_leaf_size: int = 5
    # None resolves per task: ceil(sqrt(p)) classification, ceil(p/3) regression
    max_features: Optional[int] = None
    bootstrap: bool = True

    def validate(self, n_features: int) -> "ForestParams":
        if self.n_trees < 1:
            raise ValidationError("n_trees must be >= 1", n_trees=self.n_trees)
        if self.max_depth < 1:
            raise ValidationError("max_depth must be >= 1",
                                  max_depth=self.max_depth)
        if self.min_leaf_size < 1:
            raise ValidationError("min_leaf_size must be >= 1",
                                  min_leaf_size=self.min_leaf_size)
        if self.max_features is not None and not 1 <= self.max_features <= n_features:
            raise ValidationError("max_features out of range",
                                  max_features=self.max_features,
                                  n_features=n_features)
        return self


def default_max_features(task: str, n_features: int) -> int:
    if task == "classification":
        return math.ceil(math.sqrt(n_features))
    return math.ceil(n_features / 3)


class ForestModel:
    """Bagged CART ensemble; prediction is the mean of per-tree outputs."""

    def __init__(self, trees: Sequence[Tree], task: str, params: ForestParams,
                 seed: int):
        if task not in ("regression", "classification"):
            raise ValidationError("task must be regression or classification",
                                  task=task)
        self.trees = list(trees)
        self.task = task
        self.params = params
        self.seed = int(seed)

    def _mean_over_trees(self, X: np.ndarray) -> np.ndarray:
        X = _as_matrix(X)
        # fixed summation order keeps predictions independent of thread count
        acc = np.zeros(X.shape[0], dtype=np.float64)
        for tree in self.trees:
            acc += tree.predict(X)
        return acc / len(self.trees)

    def predict(self, X) -> np.ndarray:
        """Regression: mean response. Classification: class label at 0.5."""
        if self.task == "classification":
            return (self.predict_proba(X) >= 0.5).astype(np.int64)
        return self._mean_over_trees(X)

    def predict_proba(self, X) -> np.ndarray:
        """Class-1 probability: mean of per-tree class-1 leaf fractions."""
        if self.task != "classification":
            raise ValidationError("predict_proba requires a classification forest")
        return self._mean_over_trees(X)

    def to_dict(self) -> dict:
        return {
            "kind": "forest",
            "task": self.task,
            "seed": self.seed,
            "params": {
                "n_trees": self.params.n_trees,
                "max_depth": self.params.max_depth,
                "min_leaf_size": self.params.min_leaf_size,
                "max_features": self.params.max_features,
                "bootstrap": self.params.bootstrap,
            },
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForestModel":
        params = ForestParams(**d["params"])
        trees = [Tree.from_dict(t) for t in d["trees"]]
        return cls(trees, d["task"], params, d["seed"])


def fit_random_forest(X, y, *, task: str, params: Optional[ForestParams] = None,
                      seed: int = 0, threads: int = 1) -> ForestModel:
    """Fit a bagged forest with per-tree RNG streams derived from (seed, index).

    Trees may be built in parallel; results are merged in index order, so the
    model is bit-identical for any thread count.
    """
    X = _as_matrix(X)
    y = _as_targets(y, X.shape[0])
    if task not in ("regression", "classification"):
        raise ValidationError("task must be regression or classification",
                              task=task)
    if task == "classification":
        _check_binary(y, "classification targets")
    params = (params or ForestParams()).validate(X.shape[1])
    if X.shape[0] < 2 * params.min_leaf_size:
        raise ValidationError("need at least 2*min_leaf_size rows",
                              rows=X.shape[0],
                              min_leaf_size=params.min_leaf_size)
    criterion = "gini" if task == "classification" else "variance"
    max_features = params.max_features
    if max_features is None:
        max_features = default_max_features(task, X.shape[1])
    n = X.shape[0]

    def build_one(t: int) -> Tree:
        rng = np.random.default_rng([seed, t])
        if params.bootstrap:
            idx = rng.integers(0, n, size=n).astype(np.int64)
        else:
            idx = np.arange(n, dtype=np.int64)
        feat_seed = int(rng.integers(2 ** 63))
        arrays = kernels.build_tree(X, y, idx, _CRITERION_CODES[criterion],
                                    params.max_depth, params.min_leaf_size,
                                    max_features, feat_seed)
        return Tree(*arrays, criterion=criterion)

    if threads > 1 and params.n_trees > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trees = list(pool.map(build_one, range(params.n_trees)))
    else:
        trees = [build_one(t) for t in range(params.n_trees)]
    return ForestModel(trees, task, params, seed)


# ---------------------------------------------------------------------------
# gradient-boosted classifier
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoostParams:
    n_rounds: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    min_leaf_size: int = 1

    def validate(self) -> "BoostParams":
        if self.n_rounds < 0:
            raise ValidationError("n_rounds must be >= 0", n_rounds=self.n_rounds)
        if self.max_depth < 1:
            raise ValidationError("max_depth must be >= 1",
                                  max_depth=self.max_depth)
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0",
                                  learning_rate=self.learning_rate)
        if self.min_leaf_size < 1:
            raise ValidationError("min_leaf_size must be >= 1",
                                  min_leaf_size=self.min_leaf_size)
        return self


class BoostedModel:
    """Logistic-loss gradient boosting over regression trees.

    Raw score = base_score + learning_rate * sum of stage outputs; the
    probability is the logistic of the raw score, clipped away from 0 and 1.
    """

    def __init__(self, trees: Sequence[Tree], base_score: float,
                 params: BoostParams, seed: int):
        self.trees = list(trees)
        self.base_score = float(base_score)
        self.params = params
        self.seed = int(seed)

    def raw_score(self, X) -> np.ndarray:
        X = _as_matrix(X)
        raw = np.full(X.shape[0], self.base_score, dtype=np.float64)
        for tree in self.trees:
            raw += self.params.learning_rate * tree.predict(X)
        return raw

    def predict_proba(self, X) -> np.ndarray:
        return np.clip(expit(self.raw_score(X)), PROB_CLIP, 1.0 - PROB_CLIP)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(np.int64)

    def to_dict(self) -> dict:
        return {
            "kind": "boosted",
            "base_score": self.base_score,
            "seed": self.seed,
            "params": {
                "n_rounds": self.params.n_rounds,
                "max_depth": self.params.max_depth,
                "learning_rate": self.params.learning_rate,
                "min_leaf_size": self.params.min_leaf_size,
            },
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoostedModel":
        params = BoostParams(**d["params"])
        trees = [Tree.from_dict(t) for t in d["trees"]]
        return cls(trees, d["base_score"], params, d["seed"])


def fit_gradient_boosted_classifier(X, t, *,
                                    params: Optional[BoostParams] = None,
                                    seed: int = 0) -> BoostedModel:
    """Boost regression trees on the logistic-loss gradient (t - p).

    Each round refits the tree's leaf values with a Newton step,
    sum(residuals) / sum(p * (1 - p)) per leaf.
    """
    X = _as_matrix(X)
    t = _as_targets(t, X.shape[0])
    _check_binary(t, "treatment labels")
    params = (params or BoostParams()).validate()
    p_bar = float(t.mean())
    if p_bar in (0.0, 1.0):
        raise SingleClassError("both classes required to fit a propensity model",
                               class_rate=p_bar)
    base_score = math.log(p_bar / (1.0 - p_bar))
    n = X.shape[0]
    all_rows = np.arange(n, dtype=np.int64)
    raw = np.full(n, base_score, dtype=np.float64)
    trees: list[Tree] = []
    for r in range(params.n_rounds):
        p = np.clip(expit(raw), PROB_CLIP, 1.0 - PROB_CLIP)
        grad = t - p
        hess = p * (1.0 - p)
        feat_seed = int(np.random.default_rng([seed, r]).integers(2 ** 63))
        arrays = kernels.build_tree(X, grad, all_rows, kernels.CRITERION_VARIANCE,
                                    params.max_depth, params.min_leaf_size,
                                    X.shape[1], feat_seed)
        tree = Tree(*arrays, criterion="variance")
        leaves = tree.apply(X)
        num = np.bincount(leaves, weights=grad, minlength=tree.n_nodes)
        den = np.bincount(leaves, weights=hess, minlength=tree.n_nodes)
        newton = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
        values = tree.value.copy()
        leaf_ids = np.flatnonzero(tree.feature == kernels.NO_FEATURE)
        values[leaf_ids] = newton[leaf_ids]
        tree = Tree(tree.feature, tree.threshold, tree.left, tree.right,
                    values, tree.count, criterion="variance")
        raw += params.learning_rate * values[leaves]
        trees.append(tree)
    return BoostedModel(trees, base_score, params, seed)


# ---------------------------------------------------------------------------
# metrics and cross-validation
# ---------------------------------------------------------------------------


def r2_score(y, y_hat) -> float:
    """1 - SS_res/SS_tot with SS_tot around the population mean of y."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.ndim != 1 or y.shape[0] == 0:
        raise ValidationError("y and y_hat must be equal-length 1-D arrays",
                              y_shape=tuple(y.shape), y_hat_shape=tuple(y_hat.shape))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValidationError("R^2 is undefined for constant y")
    ss_res = float(np.sum((y - y_hat) ** 2))
    return 1.0 - ss_res / ss_tot


def f1_score(t, t_hat) -> float:
    """F1 for class 1; returns 0 when precision + recall = 0."""
    t = np.asarray(t, dtype=np.float64)
    t_hat = np.asarray(t_hat, dtype=np.float64)
    if t.shape != t_hat.shape or t.ndim != 1 or t.shape[0] == 0:
        raise ValidationError("t and t_hat must be equal-length 1-D arrays",
                              t_shape=tuple(t.shape), t_hat_shape=tuple(t_hat.shape))
    _check_binary(t, "labels")
    _check_binary(t_hat, "predictions")
    tp = float(np.sum((t == 1) & (t_hat == 1)))
    fp = float(np.sum((t == 0) & (t_hat == 1)))
    fn = float(np.sum((t == 1) & (t_hat == 0)))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def kfold_indices(n: int, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffled K-fold split; fold sizes differ by at most one."""
    if k < 2:
        raise ValidationError("need at least 2 folds", k=k)
    if k > n:
        raise ValidationError("more folds than rows", k=k, rows=n)
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    out = []
    for i in range(k):
        test = np.sort(folds[i])
        train = np.sort(np.concatenate([folds[j] for j in range(k) if j != i]))
        out.append((train.astype(np.int64), test.astype(np.int64)))
    return out


@dataclass(frozen=True)
class LearnerSpec:
    """Recipe for fitting one learner; used by CV and cross-fitting."""

    task: str  # "regression" or "classification"
    model: str = "random_forest"  # or "gradient_boosted"
    forest: ForestParams = ForestParams()
    boost: BoostParams = BoostParams()

    def __post_init__(self):
        if self.task not in ("regression", "classification"):
            raise ValidationError("task must be regression or classification",
                                  task=self.task)
        if self.model not in ("random_forest", "gradient_boosted"):
            raise ValidationError("model must be random_forest or gradient_boosted",
                                  model=self.model)
        if self.model == "gradient_boosted" and self.task != "classification":
            raise ValidationError("gradient boosting is classification-only")

    def fit(self, X, y, *, seed: int, threads: int = 1):
        if self.model == "random_forest":
            return fit_random_forest(X, y, task=self.task, params=self.forest,
                                     seed=seed, threads=threads)
        return fit_gradient_boosted_classifier(X, y, params=self.boost, seed=seed)


@dataclass(frozen=True)
class CvResult:
    fold_scores: tuple[float, ...]
    mean_score: float
    metric: str


FitFunction = Callable[[np.ndarray, np.ndarray, int], object]


def cross_validate(learner: Union[LearnerSpec, FitFunction], X, y, *, k: int,
                   seed: int, task: Optional[str] = None,
                   threads: int = 1) -> CvResult:
    """K-fold CV score: R^2 for regression folds, F1 for classification.

    ``learner`` is a LearnerSpec, or any callable (X_train, y_train, fold_seed)
    -> model exposing ``predict``. Fold seeds derive deterministically from
    ``seed``; folds run sequentially and each fit may use ``threads``.
    """
    X = _as_matrix(X)
    y = _as_targets(y, X.shape[0])
    if isinstance(learner, LearnerSpec):
        task = learner.task
    elif task is None:
        raise ValidationError("task is required for callable learners")
    folds = kfold_indices(X.shape[0], k, seed)
    fold_seeds = [int(s.generate_state(1)[0])
                  for s in np.random.SeedSequence([seed, k]).spawn(k)]
    scores = []
    for (train, test), fold_seed in zip(folds, fold_seeds):
        if isinstance(learner, LearnerSpec):
            model = learner.fit(X[train], y[train], seed=fold_seed,
                                threads=threads)
        else:
            model = learner(X[train], y[train], fold_seed)
        pred = model.predict(X[test])
        if task == "classification":
            scores.append(f1_score(y[test], pred))
        else:
            scores.append(r2_score(y[test], pred))
    metric = "f1" if task == "classification" else "r2"
    return CvResult(tuple(scores), float(np.mean(scores)), metric)


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------


def model_to_dict(model: Union[ForestModel, BoostedModel]) -> dict:
    return {"format": MODEL_FORMAT, "version": MODEL_VERSION, **model.to_dict()}


def model_from_dict(d: dict) -> Union[ForestModel, BoostedModel]:
    if d.get("format") != MODEL_FORMAT:
        raise ValidationError("not a model file", found=d.get("format"))
    if d.get("version") != MODEL_VERSION:
        raise ValidationError("unsupported model file version",
                              version=d.get("version"))
    if d.get("kind") == "forest":
        return ForestModel.from_dict(d)
    if d.get("kind") == "boosted":
        return BoostedModel.from_dict(d)
    raise ValidationError("unknown model kind", kind=d.get("kind"))


def save_model(model: Union[ForestModel, BoostedModel], path) -> None:
    """Write a model as versioned JSON; floats round-trip exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh)
        fh.write("\n")


def load_model(path) -> Union[ForestModel, BoostedModel]:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
