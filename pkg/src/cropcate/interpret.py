"""Post-fit explanation of the effect surface.

A shallow CART regression tree partitions the analysis sample by raw
covariates so each leaf carries the size, mean, spread, and CI of its
members' effect estimates. Binned effect curves show the estimated effect
against one standardized covariate at a time.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from .causal import Z95, LinearCateModel, cate_batch
from .core import FeatureMatrix
from .errors import ValidationError
from .learners import Tree, fit_tree


@dataclass(frozen=True)
class LeafStats:
    """Effect statistics of one interpreter leaf."""

    n: int
    mean: float
    std: float  # population std (ddof = 0) of member effects
    ci_low: float
    ci_high: float


@dataclass(frozen=True)
class InterpreterTree:
    """CART partition of effect estimates over raw covariates."""

    tree: Tree
    feature_names: tuple
    leaf_stats: Dict[int, LeafStats]
    max_depth: int
    min_leaf_size: int
    n_rows: int

    def apply(self, X_raw) -> np.ndarray:
        """Leaf node id of each raw covariate row."""
        return self.tree.apply(np.asarray(X_raw, dtype=np.float64))

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_stats)


def default_min_leaf(n: int) -> int:
    """Interpreter default: 5% of the sample, at least one row."""
    return max(1, math.ceil(0.05 * n))


def fit_interpreter(X_raw, cate_points, *,
                    feature_names: Optional[Sequence[str]] = None,
                    max_depth: int = 3,
                    min_leaf_size: Optional[int] = None) -> InterpreterTree:
    """Variance-reduction CART on effect points, split over all features.

    The tree is grown on raw covariate values, so thresholds read in input
    units. Leaf means are the exact arithmetic means of member effects;
    the CI on each leaf mean is mean +- 1.959964 * std / sqrt(n).
    """
    if isinstance(X_raw, FeatureMatrix):
        feature_names = X_raw.column_names
        X_raw = X_raw.values
    X_raw = np.asarray(X_raw, dtype=np.float64)
    if X_raw.ndim != 2:
        raise ValidationError("covariates must be 2-D", shape=tuple(X_raw.shape))
    if feature_names is None:
        feature_names = tuple(f"x{j}" for j in range(X_raw.shape[1]))
    feature_names = tuple(str(c) for c in feature_names)
    if len(feature_names) != X_raw.shape[1]:
        raise ValidationError("feature names misaligned with covariates",
                              names=len(feature_names), cols=X_raw.shape[1])
    points = np.asarray(cate_points, dtype=np.float64)
    if points.shape != (X_raw.shape[0],):
        raise ValidationError("effect points misaligned with covariates",
                              points=tuple(points.shape), rows=X_raw.shape[0])
    n = X_raw.shape[0]
    if min_leaf_size is None:
        min_leaf_size = default_min_leaf(n)
    tree = fit_tree(X_raw, points, criterion="variance", max_depth=max_depth,
                    min_leaf_size=min_leaf_size, max_features=X_raw.shape[1])
    leaves = tree.apply(X_raw)
    stats: Dict[int, LeafStats] = {}
    for leaf in np.unique(leaves):
        members = points[leaves == leaf]
        mean = float(np.mean(members))
        std = float(np.std(members))
        half = Z95 * std / math.sqrt(members.size)
        stats[int(leaf)] = LeafStats(n=int(members.size), mean=mean, std=std,
                                     ci_low=mean - half, ci_high=mean + half)
    return InterpreterTree(tree=tree, feature_names=feature_names,
                           leaf_stats=stats, max_depth=max_depth,
                           min_leaf_size=min_leaf_size, n_rows=n)


# ---------------------------------------------------------------------------
# binned effect curves
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EffectCurve:
    """Mean effect against one standardized feature, in equal-width bins.

    Empty bins keep their center but carry count 0 and NaN statistics.
    """

    feature: str
    edges: np.ndarray  # n_bins + 1 edges spanning the observed range
    centers: np.ndarray
    mean_effect: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    counts: np.ndarray

    @property
    def n_bins(self) -> int:
        return self.centers.shape[0]


def effect_curve(model: LinearCateModel, X_std, feature: str,
                 n_bins: int = 20) -> EffectCurve:
    """Bin rows by one feature and average their effect estimates.

    The band is mean +- 1.959964 times the mean per-row SE within the bin.
    """
    if n_bins < 2:
        raise ValidationError("need at least 2 bins", n_bins=n_bins)
    if isinstance(X_std, FeatureMatrix):
        col = X_std.column(feature)  # raises on unknown feature
        values = X_std.values
    else:
        values = np.asarray(X_std, dtype=np.float64)
        names = model.feature_names
        if feature not in names:
            raise ValidationError(f"unknown feature '{feature}'",
                                  feature=feature, known=names)
        col = values[:, names.index(feature)]
    lo = float(col.min())
    hi = float(col.max())
    if hi == lo:
        raise ValidationError("feature has zero range; nothing to bin",
                              feature=feature)
    points, ses = cate_batch(model, values)
    edges = np.linspace(lo, hi, n_bins + 1)
    idx = np.minimum(((col - lo) / (hi - lo) * n_bins).astype(np.int64),
                     n_bins - 1)
    centers = (edges[:-1] + edges[1:]) / 2.0
    mean_effect = np.full(n_bins, np.nan)
    ci_lo = np.full(n_bins, np.nan)
    ci_hi = np.full(n_bins, np.nan)
    counts = np.zeros(n_bins, dtype=np.int64)
    for b in range(n_bins):
        members = idx == b
        counts[b] = int(members.sum())
        if counts[b] == 0:
            continue
        mean_effect[b] = float(points[members].mean())
        half = Z95 * float(ses[members].mean())
        ci_lo[b] = mean_effect[b] - half
        ci_hi[b] = mean_effect[b] + half
    return EffectCurve(feature=str(feature), edges=edges, centers=centers,
                       mean_effect=mean_effect, ci_low=ci_lo, ci_high=ci_hi,
                       counts=counts)


# ---------------------------------------------------------------------------
# tree rendering
# ---------------------------------------------------------------------------


def to_nested(tree: InterpreterTree) -> dict:
    """Nested node structure (ids, conditions, leaf stats) for plotting."""

    def node(i: int) -> dict:
        flat = tree.tree
        if flat.feature[i] < 0:
            s = tree.leaf_stats[i]
            return {"id": i, "n": s.n, "mean": s.mean, "std": s.std,
                    "ci_low": s.ci_low, "ci_high": s.ci_high}
        return {
            "id": i,
            "n": int(flat.count[i]),
            "feature": tree.feature_names[int(flat.feature[i])],
            "threshold": float(flat.threshold[i]),
            "left": node(int(flat.left[i])),
            "right": node(int(flat.right[i])),
        }

    return node(0)


def render_tree(tree: InterpreterTree) -> str:
    """Deterministic depth-first outline; rows satisfying the condition go left."""
    lines = []

    def walk(node: dict, depth: int) -> None:
        pad = "  " * depth
        if "feature" in node:
            lines.append(f"{pad}node {node['id']}: if {node['feature']} <= "
                         f"{node['threshold']!r} then left else right "
                         f"(n={node['n']})")
            walk(node["left"], depth + 1)
            walk(node["right"], depth + 1)
        else:
            lines.append(f"{pad}node {node['id']}: leaf n={node['n']} "
                         f"mean={node['mean']!r} std={node['std']!r} "
                         f"ci95=[{node['ci_low']!r}, {node['ci_high']!r}]")

    walk(to_nested(tree), 0)
    return "\n".join(lines) + "\n"


_SPLIT_LINE = re.compile(
    r"^(?P<pad>(?:  )*)node (?P<id>\d+): if (?P<feature>.+?) <= "
    r"(?P<threshold>\S+) then left else right \(n=(?P<n>\d+)\)$")
_LEAF_LINE = re.compile(
    r"^(?P<pad>(?:  )*)node (?P<id>\d+): leaf n=(?P<n>\d+) "
    r"mean=(?P<mean>\S+) std=(?P<std>\S+) "
    r"ci95=\[(?P<lo>\S+), (?P<hi>\S+)\]$")


def parse_rendered_tree(text: str) -> dict:
    """Inverse of render_tree: rebuild the nested structure from the outline."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValidationError("empty tree rendering")
    pos = 0

    def parse_at(depth: int) -> dict:
        nonlocal pos
        if pos >= len(lines):
            raise ValidationError("tree rendering ended early", line=pos)
        line = lines[pos]
        leaf = _LEAF_LINE.match(line)
        split = _SPLIT_LINE.match(line)
        got = leaf or split
        if not got or len(got.group("pad")) != 2 * depth:
            raise ValidationError("malformed tree rendering line", line=line)
        pos += 1
        if leaf:
            return {"id": int(leaf.group("id")), "n": int(leaf.group("n")),
                    "mean": float(leaf.group("mean")),
                    "std": float(leaf.group("std")),
                    "ci_low": float(leaf.group("lo")),
                    "ci_high": float(leaf.group("hi"))}
        return {"id": int(split.group("id")), "n": int(split.group("n")),
                "feature": split.group("feature"),
                "threshold": float(split.group("threshold")),
                "left": parse_at(depth + 1),
                "right": parse_at(depth + 1)}

    root = parse_at(0)
    if pos != len(lines):
        raise ValidationError("trailing lines after tree rendering", line=pos)
    return root
