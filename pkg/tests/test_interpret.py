"""Interpreter-tree and effect-curve tests.

Leaf statistics are compared against exact arithmetic on leaf members; the
text rendering must round-trip to the identical nested structure.
"""

import math

import numpy as np
import pytest

from cropcate.causal import Z95, LinearCateModel
from cropcate.core import FeatureMatrix, Scaler
from cropcate.errors import ValidationError
from cropcate.interpret import (
    default_min_leaf,
    effect_curve,
    fit_interpreter,
    parse_rendered_tree,
    render_tree,
    to_nested,
)


def _points_fixture(n=300, p=3, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(10.0, 4.0, size=(n, p))  # raw units, not standardized
    points = np.where(X[:, 0] > 10.0, 2.0, -1.0) + 0.3 * rng.standard_normal(n)
    return X, points


class TestDefaultMinLeaf:
    def test_five_percent_rounded_up_with_floor_one(self):
        assert default_min_leaf(1000) == 50
        assert default_min_leaf(101) == 6  # ceil(5.05)
        assert default_min_leaf(20) == 1
        assert default_min_leaf(3) == 1


class TestFitInterpreter:
    def test_leaf_means_are_exact_member_means(self):
        X, points = _points_fixture()
        tree = fit_interpreter(X, points, max_depth=3)
        leaves = tree.apply(X)
        assert set(np.unique(leaves)) == set(tree.leaf_stats)
        total = 0
        for leaf, stats in tree.leaf_stats.items():
            members = points[leaves == leaf]
            assert stats.n == members.size
            assert abs(stats.mean - members.mean()) <= 1e-12
            assert abs(stats.std - members.std()) <= 1e-12  # ddof = 0
            half = Z95 * members.std() / math.sqrt(members.size)
            assert stats.ci_low == pytest.approx(members.mean() - half)
            assert stats.ci_high == pytest.approx(members.mean() + half)
            total += stats.n
        assert total == X.shape[0]

    def test_finds_the_step_structure(self):
        X, points = _points_fixture(seed=3)
        tree = fit_interpreter(X, points, max_depth=1, min_leaf_size=10)
        nested = to_nested(tree)
        assert nested["feature"] == "x0"
        assert nested["threshold"] == pytest.approx(10.0, abs=1.0)
        assert tree.n_leaves == 2

    def test_depth_zero_yields_single_leaf(self):
        X, points = _points_fixture()
        tree = fit_interpreter(X, points, max_depth=0)
        assert tree.n_leaves == 1
        stats = tree.leaf_stats[0]
        assert stats.n == X.shape[0]
        assert stats.mean == pytest.approx(points.mean())

    def test_min_leaf_size_defaults_to_five_percent(self):
        X, points = _points_fixture(n=200)
        tree = fit_interpreter(X, points, max_depth=4)
        assert tree.min_leaf_size == 10
        leaves = tree.apply(X)
        _, counts = np.unique(leaves, return_counts=True)
        assert counts.min() >= 10

    def test_feature_matrix_supplies_names(self):
        X, points = _points_fixture(p=2)
        fm = FeatureMatrix(("rain", "heat"), X[:, :2], tuple(range(len(X))))
        tree = fit_interpreter(fm, points, max_depth=2)
        assert tree.feature_names == ("rain", "heat")
        assert "rain" in render_tree(tree) or "heat" in render_tree(tree)

    def test_misaligned_points_rejected(self):
        X, points = _points_fixture()
        with pytest.raises(ValidationError, match="misaligned"):
            fit_interpreter(X, points[:-1])

    def test_split_invariance_under_monotone_feature_shift(self):
        # adding a constant to a feature shifts thresholds but not the
        # partition of rows into leaves
        X, points = _points_fixture(seed=9)
        t1 = fit_interpreter(X, points, max_depth=3, min_leaf_size=15)
        X_shift = X.copy()
        X_shift[:, 0] += 100.0
        t2 = fit_interpreter(X_shift, points, max_depth=3, min_leaf_size=15)
        np.testing.assert_array_equal(t1.apply(X), t2.apply(X_shift))


class TestTreeRendering:
    def test_render_parse_round_trip_is_exact(self):
        X, points = _points_fixture(seed=5)
        tree = fit_interpreter(X, points, max_depth=3)
        text = render_tree(tree)
        assert parse_rendered_tree(text) == to_nested(tree)

    def test_single_leaf_round_trip(self):
        X, points = _points_fixture(n=50)
        tree = fit_interpreter(X, points, max_depth=0)
        assert parse_rendered_tree(render_tree(tree)) == to_nested(tree)

    def test_nested_counts_are_consistent(self):
        X, points = _points_fixture(seed=7)
        tree = fit_interpreter(X, points, max_depth=3)

        def check(node):
            if "feature" not in node:
                return node["n"]
            assert node["n"] == check(node["left"]) + check(node["right"])
            return node["n"]

        assert check(to_nested(tree)) == X.shape[0]

    def test_malformed_text_rejected(self):
        with pytest.raises(ValidationError):
            parse_rendered_tree("")
        with pytest.raises(ValidationError):
            parse_rendered_tree("node 0: something else\n")
        X, points = _points_fixture(n=60)
        tree = fit_interpreter(X, points, max_depth=1, min_leaf_size=5)
        text = render_tree(tree)
        with pytest.raises(ValidationError, match="trailing"):
            parse_rendered_tree(text + text)


def _affine_model(p=2):
    cov = np.zeros((p + 1, p + 1))
    cov[0, 0] = 0.04  # constant SE 0.2 regardless of x
    return LinearCateModel(intercept=1.0, beta=np.arange(1, p + 1, dtype=float),
                           covariance=cov,
                           feature_names=tuple(f"f{j}" for j in range(p)),
                           n_rows=100)


class TestEffectCurve:
    def test_affine_model_yields_affine_curve(self):
        # theta = 1 + 1*f0 + 2*f1 with f1 fixed at 0: curve over f0 passes
        # through the bin means of theta, which lie on the same line
        model = _affine_model()
        rng = np.random.default_rng(1)
        X = np.column_stack([rng.uniform(-2, 2, 400), np.zeros(400)])
        curve = effect_curve(model, X, "f0", n_bins=8)
        assert curve.n_bins == 8
        for b in range(8):
            if curve.counts[b] == 0:
                continue
            members = X[:, 0][(X[:, 0] >= curve.edges[b]) &
                              ((X[:, 0] < curve.edges[b + 1]) | (b == 7))]
            assert curve.mean_effect[b] == pytest.approx(1.0 + members.mean())
            # constant SE 0.2: the band is exactly +- Z95 * 0.2
            assert curve.ci_high[b] - curve.mean_effect[b] == pytest.approx(
                Z95 * 0.2)

    def test_bin_counts_sum_to_rows_and_edges_span_range(self):
        model = _affine_model()
        rng = np.random.default_rng(2)
        X = rng.standard_normal((500, 2))
        curve = effect_curve(model, X, "f1", n_bins=20)
        assert curve.counts.sum() == 500
        assert curve.edges[0] == X[:, 1].min()
        assert curve.edges[-1] == X[:, 1].max()
        np.testing.assert_allclose(curve.centers,
                                   (curve.edges[:-1] + curve.edges[1:]) / 2)

    def test_empty_bins_carry_nan_and_zero_count(self):
        model = _affine_model()
        # two clusters leave the middle bins empty
        x0 = np.concatenate([np.linspace(0, 1, 50), np.linspace(9, 10, 50)])
        X = np.column_stack([x0, np.zeros(100)])
        curve = effect_curve(model, X, "f0", n_bins=10)
        assert (curve.counts == 0).any()
        empty = curve.counts == 0
        assert np.isnan(curve.mean_effect[empty]).all()
        assert np.isnan(curve.ci_low[empty]).all()
        assert (curve.counts[~empty] > 0).all()
        assert np.isfinite(curve.mean_effect[~empty]).all()

    def test_maximum_lands_in_last_bin(self):
        model = _affine_model()
        X = np.column_stack([np.linspace(0, 1, 101), np.zeros(101)])
        curve = effect_curve(model, X, "f0", n_bins=5)
        assert curve.counts[-1] >= 21  # includes the right edge

    def test_unknown_feature_rejected(self):
        model = _affine_model()
        X = np.zeros((10, 2))
        with pytest.raises(ValidationError, match="unknown feature"):
            effect_curve(model, X, "nope")

    def test_zero_range_feature_rejected(self):
        model = _affine_model()
        X = np.column_stack([np.ones(50), np.linspace(0, 1, 50)])
        with pytest.raises(ValidationError, match="zero range"):
            effect_curve(model, X, "f0")

    def test_too_few_bins_rejected(self):
        model = _affine_model()
        with pytest.raises(ValidationError):
            effect_curve(model, np.zeros((10, 2)), "f0", n_bins=1)
