"""Native learners: single trees, random forests, boosting, CV, metrics."""

import math

import numpy as np
import pytest

from cropcate import (
    BoostParams,
    ForestParams,
    LearnerSpec,
    SingleClassError,
    ValidationError,
    cross_validate,
    default_max_features,
    f1_score,
    fit_gradient_boosted_classifier,
    fit_random_forest,
    kfold_indices,
    load_model,
    model_from_dict,
    model_to_dict,
    r2_score,
    save_model,
)
from cropcate.learners import fit_tree


class TestSingleTree:
    def test_recovers_step_function_exactly(self):
        X = np.linspace(-1, 1, 100).reshape(-1, 1)
        y = np.where(X[:, 0] <= 0.25, -3.0, 5.0)
        tree = fit_tree(X, y, criterion="variance", max_depth=3,
                        min_leaf_size=1)
        assert np.array_equal(tree.predict(X), y)
        root = tree.root
        assert root.split_feature == 0
        assert -0.25 < root.split_threshold < 0.75

    def test_classifies_separable_labels_perfectly(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(200, 3))
        y = (X[:, 1] > 0.3).astype(np.float64)
        tree = fit_tree(X, y, criterion="gini", max_depth=4, min_leaf_size=1)
        assert np.array_equal(tree.predict(X), y)

    def test_gini_requires_binary_targets(self):
        X = np.zeros((10, 1))
        with pytest.raises(ValidationError):
            fit_tree(X, np.arange(10.0), criterion="gini")

    def test_too_few_rows_for_min_leaf_rejected(self):
        X = np.zeros((3, 1))
        with pytest.raises(ValidationError):
            fit_tree(X, np.zeros(3), criterion="variance", min_leaf_size=2)

    def test_dict_round_trip_preserves_structure(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(80, 2))
        y = rng.normal(size=80) + X[:, 0]
        tree = fit_tree(X, y, criterion="variance", max_depth=5,
                        min_leaf_size=2)
        clone_dict = tree.to_dict()
        from cropcate.learners import Tree

        clone = Tree.from_dict(clone_dict)
        assert np.array_equal(clone.predict(X), tree.predict(X))
        assert clone.to_dict() == clone_dict


class TestDefaultMaxFeatures:
    def test_classification_uses_sqrt(self):
        assert default_max_features("classification", 9) == 3
        assert default_max_features("classification", 16) == 4
        assert default_max_features("classification", 10) == 4  # ceil

    def test_regression_uses_third(self):
        assert default_max_features("regression", 9) == 3
        assert default_max_features("regression", 16) == 6  # ceil(16/3)
        assert default_max_features("regression", 2) == 1


class TestRandomForest:
    def test_same_seed_reproduces_identical_predictions(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(150, 4))
        y = rng.normal(size=150) + 2 * X[:, 0]
        params = ForestParams(n_trees=20, max_depth=6)
        a = fit_random_forest(X, y, task="regression", params=params, seed=9)
        b = fit_random_forest(X, y, task="regression", params=params, seed=9)
        c = fit_random_forest(X, y, task="regression", params=params, seed=10)
        assert np.array_equal(a.predict(X), b.predict(X))
        assert not np.array_equal(a.predict(X), c.predict(X))

    def test_thread_count_does_not_change_predictions(self):
        rng = np.random.default_rng(8)
        X = rng.normal(size=(120, 3))
        y = (X[:, 0] + rng.normal(size=120) > 0).astype(np.float64)
        params = ForestParams(n_trees=16, max_depth=5)
        one = fit_random_forest(X, y, task="classification", params=params,
                                seed=3, threads=1)
        four = fit_random_forest(X, y, task="classification", params=params,
                                 seed=3, threads=4)
        assert np.array_equal(one.predict_proba(X), four.predict_proba(X))

    def test_forest_beats_single_tree_out_of_sample(self):
        rng = np.random.default_rng(12)
        X = rng.normal(size=(600, 5))
        y = np.sin(X[:, 0]) + 0.5 * X[:, 1] ** 2 + rng.normal(0, 0.5, 600)
        X_test = rng.normal(size=(300, 5))
        y_test = np.sin(X_test[:, 0]) + 0.5 * X_test[:, 1] ** 2 \
            + rng.normal(0, 0.5, 300)
        tree = fit_tree(X, y, criterion="variance", max_depth=12,
                        min_leaf_size=1)
        forest = fit_random_forest(
            X, y, task="regression",
            params=ForestParams(n_trees=60, max_depth=12, min_leaf_size=1),
            seed=0)
        assert r2_score(y_test, forest.predict(X_test)) > \
            r2_score(y_test, tree.predict(X_test))

    def test_probabilities_bounded_and_consistent_with_labels(self):
        rng = np.random.default_rng(14)
        X = rng.normal(size=(200, 3))
        y = (X[:, 2] > 0).astype(np.float64)
        forest = fit_random_forest(X, y, task="classification",
                                   params=ForestParams(n_trees=15,
                                                       max_depth=6),
                                   seed=1)
        proba = forest.predict_proba(X)
        labels = forest.predict(X)
        assert ((proba >= 0) & (proba <= 1)).all()
        assert np.array_equal(labels, (proba >= 0.5).astype(np.float64))

    def test_without_bootstrap_and_full_features_trees_are_identical(self):
        rng = np.random.default_rng(16)
        X = rng.normal(size=(100, 3))
        y = rng.normal(size=100)
        params = ForestParams(n_trees=5, max_depth=4, max_features=3,
                              bootstrap=False)
        forest = fit_random_forest(X, y, task="regression", params=params,
                                   seed=2)
        single = fit_tree(X, y, criterion="variance", max_depth=4,
                          min_leaf_size=params.min_leaf_size)
        assert np.allclose(forest.predict(X), single.predict(X), atol=1e-12)

    def test_param_validation(self):
        with pytest.raises(ValidationError):
            ForestParams(n_trees=0).validate(n_features=3)
        with pytest.raises(ValidationError):
            ForestParams(max_features=7).validate(n_features=3)


class TestGradientBoosting:
    def test_single_class_target_rejected(self):
        X = np.random.default_rng(0).normal(size=(30, 2))
        with pytest.raises(SingleClassError):
            fit_gradient_boosted_classifier(X, np.ones(30))

    def test_base_score_is_log_odds_of_base_rate(self):
        rng = np.random.default_rng(18)
        X = rng.normal(size=(100, 2))
        y = np.zeros(100)
        y[:25] = 1.0
        model = fit_gradient_boosted_classifier(
            X, y, params=BoostParams(n_rounds=1))
        assert model.base_score == pytest.approx(math.log(0.25 / 0.75))

    def test_more_rounds_reduce_log_loss_in_sample(self):
        rng = np.random.default_rng(20)
        X = rng.normal(size=(300, 4))
        p = 1 / (1 + np.exp(-(1.5 * X[:, 0] - X[:, 1])))
        y = (rng.random(300) < p).astype(np.float64)

        def log_loss(model):
            q = model.predict_proba(X)
            return float(-np.mean(y * np.log(q) + (1 - y) * np.log(1 - q)))

        few = fit_gradient_boosted_classifier(
            X, y, params=BoostParams(n_rounds=5), seed=0)
        many = fit_gradient_boosted_classifier(
            X, y, params=BoostParams(n_rounds=80), seed=0)
        assert log_loss(many) < log_loss(few)

    def test_probabilities_clipped_away_from_bounds(self):
        rng = np.random.default_rng(22)
        X = rng.normal(size=(200, 2))
        y = (X[:, 0] > 0).astype(np.float64)  # separable -> extreme scores
        model = fit_gradient_boosted_classifier(
            X, y, params=BoostParams(n_rounds=200, learning_rate=0.5), seed=0)
        proba = model.predict_proba(X)
        assert proba.min() >= 1e-6
        assert proba.max() <= 1 - 1e-6

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(24)
        X = rng.normal(size=(150, 3))
        y = (rng.random(150) < 0.4).astype(np.float64)
        a = fit_gradient_boosted_classifier(X, y, seed=5,
                                            params=BoostParams(n_rounds=20))
        b = fit_gradient_boosted_classifier(X, y, seed=5,
                                            params=BoostParams(n_rounds=20))
        assert np.array_equal(a.predict_proba(X), b.predict_proba(X))


class TestMetrics:
    def test_r2_hand_values(self):
        assert r2_score([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 1.0
        assert r2_score([1.0, 2.0, 3.0], [2.0, 2.0, 2.0]) == 0.0
        assert r2_score([1.0, 2.0, 3.0, 4.0], [4.0, 3.0, 2.0, 1.0]) == \
            pytest.approx(-3.0)

    def test_r2_undefined_for_constant_target(self):
        with pytest.raises(ValidationError):
            r2_score([2.0, 2.0], [1.0, 3.0])

    def test_f1_hand_values(self):
        assert f1_score([1, 0, 1, 0], [1, 0, 1, 0]) == 1.0
        assert f1_score([1, 1, 0, 0], [0, 0, 0, 0]) == 0.0
        # tp=1, fp=1, fn=1 -> precision=recall=0.5 -> f1=0.5
        assert f1_score([1, 1, 0, 0], [1, 0, 1, 0]) == pytest.approx(0.5)


class TestKFold:
    def test_folds_partition_rows(self):
        folds = kfold_indices(25, 3, seed=0)
        assert len(folds) == 3
        all_test = np.concatenate([test for _, test in folds])
        assert sorted(all_test.tolist()) == list(range(25))
        sizes = sorted(len(test) for _, test in folds)
        assert sizes[-1] - sizes[0] <= 1
        for train, test in folds:
            assert not set(train.tolist()) & set(test.tolist())
            assert len(train) + len(test) == 25

    def test_deterministic_given_seed(self):
        a = kfold_indices(40, 4, seed=7)
        b = kfold_indices(40, 4, seed=7)
        c = kfold_indices(40, 4, seed=8)
        assert all(np.array_equal(x[1], y[1]) for x, y in zip(a, b))
        assert any(not np.array_equal(x[1], y[1]) for x, y in zip(a, c))


class TestCrossValidate:
    def test_mean_of_fold_scores_and_metric_name(self):
        rng = np.random.default_rng(26)
        X = rng.normal(size=(120, 3))
        y = 2 * X[:, 0] + rng.normal(0, 0.3, 120)
        spec = LearnerSpec(task="regression",
                           forest=ForestParams(n_trees=10, max_depth=6))
        result = cross_validate(spec, X, y, k=3, seed=0)
        assert result.metric == "r2"
        assert result.mean_score == pytest.approx(
            float(np.mean(result.fold_scores)))
        assert len(result.fold_scores) == 3

    def test_thread_count_does_not_change_scores(self):
        rng = np.random.default_rng(28)
        X = rng.normal(size=(90, 3))
        y = (X[:, 0] > 0).astype(np.float64)
        spec = LearnerSpec(task="classification",
                           forest=ForestParams(n_trees=8, max_depth=4))
        one = cross_validate(spec, X, y, k=3, seed=1, threads=1)
        four = cross_validate(spec, X, y, k=3, seed=1, threads=4)
        assert one.fold_scores == four.fold_scores


class TestSerialization:
    def test_forest_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(30)
        X = rng.normal(size=(100, 3))
        y = rng.normal(size=100) + X[:, 1]
        model = fit_random_forest(X, y, task="regression",
                                  params=ForestParams(n_trees=6, max_depth=5),
                                  seed=0)
        path = tmp_path / "forest.json"
        save_model(model, path)
        clone = load_model(path)
        assert np.array_equal(clone.predict(X), model.predict(X))

    def test_boosting_dict_round_trip(self):
        rng = np.random.default_rng(32)
        X = rng.normal(size=(80, 2))
        y = (X[:, 0] > 0).astype(np.float64)
        model = fit_gradient_boosted_classifier(
            X, y, params=BoostParams(n_rounds=10), seed=0)
        clone = model_from_dict(model_to_dict(model))
        assert np.array_equal(clone.predict_proba(X), model.predict_proba(X))
        assert clone.base_score == model.base_score


class TestLearnerSpec:
    def test_boosting_is_classification_only(self):
        with pytest.raises(ValidationError):
            LearnerSpec(task="regression", model="gradient_boosted")

    def test_unknown_task_rejected(self):
        with pytest.raises(ValidationError):
            LearnerSpec(task="ranking")
