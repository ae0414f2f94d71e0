"""Compiled regression-tree kernels used by the out-of-bag forest imputer.

Trees are CART-style (weighted squared-error splits). All randomness inside a
tree comes from a counter-based splitmix64 stream keyed on (tree seed, node
index, draw index), so a tree is a pure function of its training rows and seed.
"""

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True)
def _mix(x):
    x = x + _GOLDEN
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


@njit(cache=True)
def tree_seed(master, arm, tree):
    s = _mix(np.uint64(master))
    s = _mix(s ^ np.uint64(arm))
    return _mix(s ^ np.uint64(tree))


@njit(cache=True)
def _uniform(seed, node, draw):
    h = _mix(seed ^ _mix(np.uint64(node) * np.uint64(1_000_003) + np.uint64(draw)))
    return (h >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def build_tree(X, y, w, rows, min_leaf, max_depth, mtry, seed):
    """Grow one tree on ``rows`` (indices into X/y) with integer weights ``w``.

    ``min_leaf`` counts distinct rows; ``max_depth < 0`` means unlimited.
    Returns (feature, threshold, left, right, value, n_nodes); leaves have
    feature == -1.
    """
    m = rows.shape[0]
    d = X.shape[1]
    cap = 2 * m + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)

    order = rows.copy()
    buf = np.empty(m, np.int64)
    stack_node = np.empty(cap, np.int64)
    stack_lo = np.empty(cap, np.int64)
    stack_hi = np.empty(cap, np.int64)
    stack_depth = np.empty(cap, np.int64)
    feats = np.arange(d)

    n_nodes = 1
    top = 0
    stack_node[0] = 0
    stack_lo[0] = 0
    stack_hi[0] = m
    stack_depth[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = stack_node[top]
        lo = stack_lo[top]
        hi = stack_hi[top]
        depth = stack_depth[top]

        sw = 0.0
        swy = 0.0
        ymin = np.inf
        ymax = -np.inf
        for t in range(lo, hi):
            r = order[t]
            sw += w[r]
            swy += w[r] * y[r]
            if y[r] < ymin:
                ymin = y[r]
            if y[r] > ymax:
                ymax = y[r]
        value[node] = swy / sw
        size = hi - lo
        if size < 2 * min_leaf or ymin == ymax or (max_depth >= 0 and depth >= max_depth):
            continue

        # partial Fisher-Yates to pick mtry features
        for j in range(d):
            feats[j] = j
        for j in range(mtry):
            u = _uniform(seed, node, j)
            pick = j + int(u * (d - j))
            if pick >= d:
                pick = d - 1
            tmp = feats[j]
            feats[j] = feats[pick]
            feats[pick] = tmp

        best_score = -np.inf
        best_feat = -1
        best_thr = 0.0
        vals = np.empty(size)
        for jj in range(mtry):
            f = feats[jj]
            for t in range(size):
                vals[t] = X[order[lo + t], f]
            srt = np.argsort(vals, kind="mergesort")
            lw = 0.0
            lwy = 0.0
            for t in range(size - 1):
                r = order[lo + srt[t]]
                lw += w[r]
                lwy += w[r] * y[r]
                if t + 1 < min_leaf or size - t - 1 < min_leaf:
                    continue
                v0 = vals[srt[t]]
                v1 = vals[srt[t + 1]]
                if not v0 < v1:
                    continue
                rw = sw - lw
                rwy = swy - lwy
                score = lwy * lwy / lw + rwy * rwy / rw
                if score > best_score:
                    best_score = score
                    best_feat = f
                    thr = v0 + 0.5 * (v1 - v0)
                    if thr >= v1:
                        thr = v0
                    best_thr = thr
        if best_feat < 0:
            continue

        nl = 0
        for t in range(lo, hi):
            if X[order[t], best_feat] <= best_thr:
                buf[nl] = order[t]
                nl += 1
        nr = nl
        for t in range(lo, hi):
            if X[order[t], best_feat] > best_thr:
                buf[nr] = order[t]
                nr += 1
        for t in range(size):
            order[lo + t] = buf[t]

        feature[node] = best_feat
        threshold[node] = best_thr
        li = n_nodes
        ri = n_nodes + 1
        n_nodes += 2
        left[node] = li
        right[node] = ri
        stack_node[top] = li
        stack_lo[top] = lo
        stack_hi[top] = lo + nl
        stack_depth[top] = depth + 1
        top += 1
        stack_node[top] = ri
        stack_lo[top] = lo + nl
        stack_hi[top] = hi
        stack_depth[top] = depth + 1
        top += 1
    return feature, threshold, left, right, value, n_nodes


@njit(cache=True)
def predict_tree(X, feature, threshold, left, right, value):
    n = X.shape[0]
    out = np.empty(n)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


@njit(cache=True)
def forest_predictions(X, y, arm_rows, W, min_leaf, max_depth, mtry, master_seed, arm):
    """Grow one tree per row of ``W`` on the in-bag members of ``arm_rows``.

    Returns ``P`` (B x n) with every tree's prediction for every unit, and a
    boolean vector marking trees that had at least one in-bag row.
    """
    B = W.shape[0]
    n = X.shape[0]
    P = np.zeros((B, n))
    valid = np.zeros(B, np.bool_)
    rows = np.empty(arm_rows.shape[0], np.int64)
    for b in range(B):
        m = 0
        for t in range(arm_rows.shape[0]):
            r = arm_rows[t]
            if W[b, r] > 0:
                rows[m] = r
                m += 1
        if m == 0:
            continue
        wb = W[b].astype(np.float64)
        seed = tree_seed(master_seed, arm, b)
        feature, threshold, left, right, value, _ = build_tree(
            X, y, wb, rows[:m], min_leaf, max_depth, mtry, seed
        )
        P[b] = predict_tree(X, feature, threshold, left, right, value)
        valid[b] = True
    return P, valid
