"""Hot CART kernels: best-split search, tree construction, tree application.

Two interchangeable implementations live here:

* a loop-oriented builder compiled with numba ``@njit`` (default), and
* a vectorized pure-numpy builder used when numba is unavailable or when
  ``CROPCATE_DISABLE_NUMBA=1`` is set.

Both paths follow the exact same arithmetic (sequential prefix sums, midpoint
thresholds, strict-improvement tie-breaking over ascending feature index and
threshold) so they produce bit-identical trees; ``benchmarks/bench_kernels.py``
compares their speed.

Trees are stored flat: parallel arrays ``feature``, ``threshold``, ``left``,
``right``, ``value``, ``count`` indexed by node id, with ``feature == -1``
marking leaves. Splits send rows with ``x[feature] <= threshold`` left.

Per-node feature subsets are drawn with an embedded splitmix64 stream seeded
per tree, so results are reproducible across platforms, thread counts, and
the two implementations.
"""

from __future__ import annotations

import os

import numpy as np

CRITERION_VARIANCE = 0
CRITERION_GINI = 1
NO_FEATURE = -1

# A split must beat this gain to be accepted; guards float noise on
# (near-)constant targets without affecting real-valued gains.
MIN_GAIN = 1e-12

_MASK64 = (1 << 64) - 1
_SM64_GAMMA = 0x9E3779B97F4A7C15
_SM64_MULT1 = 0xBF58476D1CE4E5B9
_SM64_MULT2 = 0x94D049BB133111EB


def numba_disabled_by_env() -> bool:
    return os.environ.get("CROPCATE_DISABLE_NUMBA", "").strip() not in ("", "0")


NUMBA_ENABLED = False
if not numba_disabled_by_env():
    try:
        from numba import njit as _njit

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_ENABLED = False


def backend() -> str:
    """Name of the active kernel implementation."""
    return "numba" if NUMBA_ENABLED else "numpy"


# ---------------------------------------------------------------------------
# pure-numpy implementation
# ---------------------------------------------------------------------------


def _sm64_next_py(state: int):
    state = (state + _SM64_GAMMA) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * _SM64_MULT1) & _MASK64
    z = ((z ^ (z >> 27)) * _SM64_MULT2) & _MASK64
    z = z ^ (z >> 31)
    return state, z


def _feature_subset_py(state: int, p: int, m: int):
    # partial Fisher-Yates; result sorted ascending for the tie-break order
    arr = list(range(p))
    for i in range(m):
        state, z = _sm64_next_py(state)
        j = i + z % (p - i)
        arr[i], arr[j] = arr[j], arr[i]
    return state, np.array(sorted(arr[:m]), dtype=np.int64)


def _best_split_numpy(X, seg, c, y_seg, criterion, min_leaf, feats):
    """Best split over the given features; returns (feature, threshold, gain)."""
    m = seg.shape[0]
    best_feat = NO_FEATURE
    best_thr = np.nan
    best_gain = MIN_GAIN
    ks = np.arange(1, m, dtype=np.int64)
    for f in feats:
        xs = X[seg, f]
        order = np.argsort(xs, kind="stable")
        x_sorted = xs[order]
        if x_sorted[0] == x_sorted[m - 1]:
            continue
        valid = (ks >= min_leaf) & (ks <= m - min_leaf)
        valid &= x_sorted[:-1] != x_sorted[1:]
        if not valid.any():
            continue
        if criterion == CRITERION_VARIANCE:
            cs = c[order]
            s1 = np.cumsum(cs)
            s2 = np.cumsum(cs * cs)
            total = s2[m - 1] - s1[m - 1] * s1[m - 1] / m
            s1k, s2k = s1[:-1], s2[:-1]
            ss_left = s2k - s1k * s1k / ks
            d1 = s1[m - 1] - s1k
            ss_right = (s2[m - 1] - s2k) - d1 * d1 / (m - ks)
            gains = (total - ss_left - ss_right) / m
        else:
            ones = np.cumsum(y_seg[order])
            total1 = ones[m - 1]
            gg_total = 2.0 * total1 * (m - total1) / m
            o = ones[:-1]
            gg_left = 2.0 * o * (ks - o) / ks
            r1 = total1 - o
            gg_right = 2.0 * r1 * ((m - ks) - r1) / (m - ks)
            gains = (gg_total - gg_left - gg_right) / m
        gains = np.where(valid, gains, -np.inf)
        k = int(np.argmax(gains))
        if gains[k] > best_gain:
            best_gain = float(gains[k])
            best_feat = int(f)
            best_thr = float((x_sorted[k] + x_sorted[k + 1]) / 2.0)
    return best_feat, best_thr, best_gain


def _build_tree_numpy(
    X, y, samples, criterion, max_depth, min_leaf, max_features, feat_seed,
    node_feature, node_threshold, node_left, node_right, node_value, node_count,
):
    p = X.shape[1]
    state = int(feat_seed)
    n_nodes = 1
    stack = [(0, 0, samples.shape[0], 0)]
    while stack:
        node, start, end, depth = stack.pop()
        seg = samples[start:end]
        m = end - start
        y_seg = y[seg]
        total = float(np.cumsum(y_seg)[m - 1])  # sequential fold, matches the loop path
        mean = total / m
        node_value[node] = mean
        node_count[node] = m
        if depth >= max_depth or m < 2 * min_leaf:
            continue
        if max_features < p:
            state, feats = _feature_subset_py(state, p, max_features)
        else:
            feats = np.arange(p, dtype=np.int64)
        c = y_seg - mean if criterion == CRITERION_VARIANCE else None
        feat, thr, _ = _best_split_numpy(X, seg, c, y_seg, criterion, min_leaf, feats)
        if feat == NO_FEATURE:
            continue
        go_left = X[seg, feat] <= thr
        left_block = seg[go_left]
        right_block = seg[~go_left]
        n_left = left_block.shape[0]
        samples[start:start + n_left] = left_block
        samples[start + n_left:end] = right_block
        left_id, right_id = n_nodes, n_nodes + 1
        n_nodes += 2
        node_feature[node] = feat
        node_threshold[node] = thr
        node_left[node] = left_id
        node_right[node] = right_id
        stack.append((right_id, start + n_left, end, depth + 1))
        stack.append((left_id, start, start + n_left, depth + 1))
    return n_nodes


def _apply_tree_numpy(node_feature, node_threshold, node_left, node_right, X):
    n = X.shape[0]
    idx = np.zeros(n, dtype=np.int64)
    rows = np.arange(n)
    while True:
        feat = node_feature[idx]
        internal = feat >= 0
        if not internal.any():
            return idx
        xf = X[rows, np.where(internal, feat, 0)]
        go_left = xf <= node_threshold[idx]
        nxt = np.where(go_left, node_left[idx], node_right[idx])
        idx = np.where(internal, nxt, idx)


# ---------------------------------------------------------------------------
# numba implementation (same algorithm, loop style)
# ---------------------------------------------------------------------------

if NUMBA_ENABLED:

    @_njit(cache=True, nogil=True, inline="always")
    def _sm64_next_nb(state):
        state = state + np.uint64(_SM64_GAMMA)
        z = state
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_SM64_MULT1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_SM64_MULT2)
        z = z ^ (z >> np.uint64(31))
        return state, z

    @_njit(cache=True, nogil=True)
    def _build_tree_nb(
        X, y, samples, criterion, max_depth, min_leaf, max_features, feat_seed,
        node_feature, node_threshold, node_left, node_right, node_value, node_count,
    ):
        p = X.shape[1]
        state = np.uint64(feat_seed)
        # DFS stack grows by at most one entry per level of descent
        stack_cap = max_depth + 4
        stack_node = np.empty(stack_cap, dtype=np.int64)
        stack_start = np.empty(stack_cap, dtype=np.int64)
        stack_end = np.empty(stack_cap, dtype=np.int64)
        stack_depth = np.empty(stack_cap, dtype=np.int64)
        top = 0
        stack_node[0] = 0
        stack_start[0] = 0
        stack_end[0] = samples.shape[0]
        stack_depth[0] = 0
        top = 1
        n_nodes = 1
        perm = np.empty(p, dtype=np.int64)
        while top > 0:
            top -= 1
            node = stack_node[top]
            start = stack_start[top]
            end = stack_end[top]
            depth = stack_depth[top]
            m = end - start
            total = 0.0
            for i in range(start, end):
                total += y[samples[i]]
            mean = total / m
            node_value[node] = mean
            node_count[node] = m
            if depth >= max_depth or m < 2 * min_leaf:
                continue

            if max_features < p:
                for i in range(p):
                    perm[i] = i
                for i in range(max_features):
                    state, z = _sm64_next_nb(state)
                    j = i + np.int64(z % np.uint64(p - i))
                    tmp = perm[i]
                    perm[i] = perm[j]
                    perm[j] = tmp
                feats = np.sort(perm[:max_features].copy())
            else:
                feats = np.arange(p, dtype=np.int64)

            best_feat = np.int64(NO_FEATURE)
            best_thr = np.nan
            best_gain = MIN_GAIN
            x_node = np.empty(m, dtype=np.float64)
            t_node = np.empty(m, dtype=np.float64)
            for fi in range(feats.shape[0]):
                f = feats[fi]
                for i in range(m):
                    x_node[i] = X[samples[start + i], f]
                order = np.argsort(x_node, kind="mergesort")
                if x_node[order[0]] == x_node[order[m - 1]]:
                    continue
                if criterion == CRITERION_VARIANCE:
                    s1 = 0.0
                    s2 = 0.0
                    for i in range(m):
                        v = y[samples[start + order[i]]] - mean
                        t_node[i] = v
                        s1 += v
                        s2 += v * v
                    total_ss = s2 - s1 * s1 / m
                    run1 = 0.0
                    run2 = 0.0
                    for k in range(1, m):
                        v = t_node[k - 1]
                        run1 += v
                        run2 += v * v
                        if k < min_leaf or k > m - min_leaf:
                            continue
                        xa = x_node[order[k - 1]]
                        xb = x_node[order[k]]
                        if xa == xb:
                            continue
                        ss_left = run2 - run1 * run1 / k
                        d1 = s1 - run1
                        ss_right = (s2 - run2) - d1 * d1 / (m - k)
                        gain = (total_ss - ss_left - ss_right) / m
                        if gain > best_gain:
                            best_gain = gain
                            best_feat = f
                            best_thr = (xa + xb) / 2.0
                else:
                    total1 = 0.0
                    for i in range(m):
                        v = y[samples[start + order[i]]]
                        t_node[i] = v
                        total1 += v
                    gg_total = 2.0 * total1 * (m - total1) / m
                    run1 = 0.0
                    for k in range(1, m):
                        run1 += t_node[k - 1]
                        if k < min_leaf or k > m - min_leaf:
                            continue
                        xa = x_node[order[k - 1]]
                        xb = x_node[order[k]]
                        if xa == xb:
                            continue
                        gg_left = 2.0 * run1 * (k - run1) / k
                        r1 = total1 - run1
                        gg_right = 2.0 * r1 * ((m - k) - r1) / (m - k)
                        gain = (gg_total - gg_left - gg_right) / m
                        if gain > best_gain:
                            best_gain = gain
                            best_feat = f
                            best_thr = (xa + xb) / 2.0

            if best_feat == NO_FEATURE:
                continue
            # stable two-pass partition of samples[start:end]
            buf = np.empty(m, dtype=np.int64)
            n_left = 0
            for i in range(start, end):
                if X[samples[i], best_feat] <= best_thr:
                    buf[n_left] = samples[i]
                    n_left += 1
            n_right = n_left
            for i in range(start, end):
                if not (X[samples[i], best_feat] <= best_thr):
                    buf[n_right] = samples[i]
                    n_right += 1
            for i in range(m):
                samples[start + i] = buf[i]
            left_id = n_nodes
            right_id = n_nodes + 1
            n_nodes += 2
            node_feature[node] = best_feat
            node_threshold[node] = best_thr
            node_left[node] = left_id
            node_right[node] = right_id
            stack_node[top] = right_id
            stack_start[top] = start + n_left
            stack_end[top] = end
            stack_depth[top] = depth + 1
            top += 1
            stack_node[top] = left_id
            stack_start[top] = start
            stack_end[top] = start + n_left
            stack_depth[top] = depth + 1
            top += 1
        return n_nodes

    @_njit(cache=True, nogil=True)
    def _apply_tree_nb(node_feature, node_threshold, node_left, node_right, X):
        n = X.shape[0]
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            node = 0
            while node_feature[node] >= 0:
                if X[i, node_feature[node]] <= node_threshold[node]:
                    node = node_left[node]
                else:
                    node = node_right[node]
            out[i] = node
        return out


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------


def build_tree(X, y, samples, criterion, max_depth, min_leaf, max_features,
               feat_seed, *, force_numpy=False):
    """Grow a CART tree and return its flat node arrays.

    ``samples`` are row indices into X/y (repeats allowed, e.g. a bootstrap
    draw). Returns (feature, threshold, left, right, value, count) trimmed to
    the number of nodes actually used.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    samples = np.ascontiguousarray(samples, dtype=np.int64).copy()
    n = samples.shape[0]
    if n == 0:
        raise ValueError("cannot build a tree on zero samples")
    min_leaf = max(1, int(min_leaf))
    # leaves <= ceil(n / min_leaf) and <= 2**max_depth
    max_leaves = -(-n // min_leaf)
    if max_depth < 60:
        max_leaves = min(max_leaves, 2 ** int(max_depth))
    cap = 2 * max_leaves + 1
    node_feature = np.full(cap, NO_FEATURE, dtype=np.int64)
    node_threshold = np.full(cap, np.nan, dtype=np.float64)
    node_left = np.full(cap, -1, dtype=np.int64)
    node_right = np.full(cap, -1, dtype=np.int64)
    node_value = np.zeros(cap, dtype=np.float64)
    node_count = np.zeros(cap, dtype=np.int64)
    impl = _build_tree_nb if (NUMBA_ENABLED and not force_numpy) else _build_tree_numpy
    n_nodes = impl(
        X, y, samples, int(criterion), int(max_depth), int(min_leaf),
        int(max_features), int(feat_seed),
        node_feature, node_threshold, node_left, node_right, node_value, node_count,
    )
    return (
        node_feature[:n_nodes].copy(),
        node_threshold[:n_nodes].copy(),
        node_left[:n_nodes].copy(),
        node_right[:n_nodes].copy(),
        node_value[:n_nodes].copy(),
        node_count[:n_nodes].copy(),
    )


def apply_tree(node_feature, node_threshold, node_left, node_right, X, *,
               force_numpy=False):
    """Leaf node id reached by each row of X."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if NUMBA_ENABLED and not force_numpy:
        return _apply_tree_nb(node_feature, node_threshold, node_left, node_right, X)
    return _apply_tree_numpy(node_feature, node_threshold, node_left, node_right, X)
