"""Compiled inner loops for the sliding feature bank and the forest.

Everything here works on plain float64/int64 arrays. The Python-facing
wrappers with argument checking live in ``featurize`` and ``forest``.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _band_counts(coords, nt, m, r):
    """Match counts over templates stored in first-coordinate order.

    A two-pointer sweep limits partners to those whose first coordinate is
    within ``r``; the other coordinates are compared branch-free.
    """
    xs = coords[0]
    a_count = 0
    b_count = 0
    hi = 0
    for a in range(nt):
        xa = xs[a]
        if hi < a + 1:
            hi = a + 1
        while hi < nt and xs[hi] - xa <= r:
            hi += 1
        if m == 2:
            c1 = coords[1]
            c2 = coords[2]
            y1 = c1[a]
            y2 = c2[a]
            for b in range(a + 1, hi):
                ok1 = abs(c1[b] - y1) <= r
                ok2 = abs(c2[b] - y2) <= r
                b_count += ok1
                a_count += ok1 & ok2
        else:
            for b in range(a + 1, hi):
                ok = True
                for k in range(1, m):
                    ok = ok & (abs(coords[k, b] - coords[k, a]) <= r)
                b_count += ok
                a_count += ok & (abs(coords[m, b] - coords[m, a]) <= r)
    return 2 * a_count, 2 * b_count


@njit(cache=True)
def _sorted_templates(x, lo, nt, m, coords, sidx):
    order = np.argsort(x[lo:lo + nt], kind="mergesort")
    for b in range(nt):
        i = lo + order[b]
        sidx[b] = i
        for k in range(m + 1):
            coords[k, b] = x[i + k]


@njit(cache=True)
def sampen_counts(x, m, r):
    """Ordered template-pair match counts (A, B) over the first N - m templates."""
    nt = x.shape[0] - m
    coords = np.empty((m + 1, nt))
    sidx = np.empty(nt, np.int64)
    _sorted_templates(x, 0, nt, m, coords, sidx)
    return _band_counts(coords, nt, m, r)


@njit(cache=True)
def sampen_from_counts(a_count, b_count, n, m):
    if a_count > 0:
        return math.log(b_count / a_count)
    if b_count > 0:
        return math.log(b_count + 1.0)
    return math.log(float(n - m - 1) * float(n - m))


@njit(cache=True)
def pop_std(x):
    mu = 0.0
    for v in x:
        mu += v
    mu /= x.shape[0]
    s = 0.0
    for v in x:
        s += (v - mu) * (v - mu)
    return math.sqrt(s / x.shape[0])


@njit(cache=True)
def sampen_series(x, ends, width, m, r_frac):
    """SampEn of ``x[e - width:e]`` for every end index ``e``; NaN when out of range.

    The first-coordinate order of the templates is carried from one window to
    the next: templates leaving the window are deleted and entering ones are
    inserted, so a 1 s step costs O(step * width) instead of a full sort.
    """
    out = np.full(ends.shape[0], np.nan)
    nt = width - m
    coords = np.empty((m + 1, nt))
    sidx = np.empty(nt, np.int64)
    prev = -1
    for k in range(ends.shape[0]):
        e = ends[k]
        if e - width < 0 or e > x.shape[0]:
            continue
        step = e - prev
        if prev < 0 or step <= 0 or step >= nt:
            _sorted_templates(x, e - width, nt, m, coords, sidx)
        else:
            # drop templates that left the window (one compaction pass)
            lo = e - width
            cnt = 0
            for q in range(nt):
                if sidx[q] >= lo:
                    sidx[cnt] = sidx[q]
                    for c in range(m + 1):
                        coords[c, cnt] = coords[c, q]
                    cnt += 1
            # merge the entering templates in from the back
            new_start = prev - m
            order = np.argsort(x[new_start:e - m], kind="mergesort")
            src = cnt - 1
            dst = nt - 1
            for t in range(order.shape[0] - 1, -1, -1):
                i1 = new_start + order[t]
                v = x[i1]
                while src >= 0 and coords[0, src] > v:
                    sidx[dst] = sidx[src]
                    for c in range(m + 1):
                        coords[c, dst] = coords[c, src]
                    src -= 1
                    dst -= 1
                sidx[dst] = i1
                for c in range(m + 1):
                    coords[c, dst] = x[i1 + c]
                dst -= 1
        prev = e
        r = r_frac * pop_std(x[e - width:e])
        a_count, b_count = _band_counts(coords, nt, m, r)
        out[k] = sampen_from_counts(a_count, b_count, width, m)
    return out


KATZ_DEN_EPS = 1e-9


@njit(cache=True)
def katz_value(y):
    n_pts = y.shape[0]
    n = n_pts - 1
    if n < 2:
        return 1.0
    path = 0.0
    far = 0.0
    y0 = y[0]
    for k in range(n):
        dy = y[k + 1] - y[k]
        path += math.sqrt(1.0 + dy * dy)
        dk = y[k + 1] - y0
        d = math.sqrt((k + 1.0) * (k + 1.0) + dk * dk)
        if d > far:
            far = d
    if far <= 0.0 or path <= 0.0:
        return 1.0
    ln = math.log10(n)
    den = ln + math.log10(far / path)
    if den <= KATZ_DEN_EPS:  # singular: the value diverges as den -> 0
        return 1.0
    return ln / den


@njit(cache=True)
def katz_series(x, ends, width):
    out = np.full(ends.shape[0], np.nan)
    for k in range(ends.shape[0]):
        e = ends[k]
        if e - width < 0 or e > x.shape[0]:
            continue
        out[k] = katz_value(x[e - width:e])
    return out


@njit(cache=True)
def window_drop_series(v, start_s, rate_hz, anchors, horizon_s):
    """Desaturation drop per anchor: max over [a - h, a] minus min over [a, a + h].

    Windows are clamped to the trace; a side with no samples borrows the
    nearest sample of the other side. ``valid`` is False when both are empty.
    """
    n = v.shape[0]
    out = np.zeros(anchors.shape[0])
    valid = np.zeros(anchors.shape[0], np.bool_)
    for k in range(anchors.shape[0]):
        a = anchors[k]
        lo = max(0, int(math.ceil((a - horizon_s - start_s) * rate_hz - 1e-9)))
        mid_hi = min(n - 1, int(math.floor((a - start_s) * rate_hz + 1e-9)))
        mid_lo = max(0, int(math.ceil((a - start_s) * rate_hz - 1e-9)))
        hi = min(n - 1, int(math.floor((a + horizon_s - start_s) * rate_hz + 1e-9)))
        has_pre = lo <= mid_hi
        has_post = mid_lo <= hi
        if not has_pre and not has_post:
            continue
        if not has_pre:
            lo = mid_lo
            mid_hi = mid_lo
        if not has_post:
            mid_lo = mid_hi
            hi = mid_hi
        pre_max = v[lo]
        for i in range(lo, mid_hi + 1):
            if v[i] > pre_max:
                pre_max = v[i]
        post_min = v[mid_lo]
        for i in range(mid_lo, hi + 1):
            if v[i] < post_min:
                post_min = v[i]
        out[k] = max(0.0, pre_max - post_min)
        valid[k] = True
    return out, valid


# -- forest -------------------------------------------------------------------


@njit(cache=True)
def _gini(pos, tot):
    if tot <= 0.0:
        return 0.0
    p = pos / tot
    return 2.0 * p * (1.0 - p)


@njit(cache=True)
def grow_tree(X, y, weights, counts, max_features, min_samples_split, max_candidates, seed):
    """Grow one weighted-Gini tree on the rows with ``counts > 0``.

    ``weights`` holds the per-row class weight; a row drawn ``c`` times by the
    bootstrap contributes ``c * weight``. Returns flat node arrays.
    """
    np.random.seed(seed)
    n_features = X.shape[1]
    idx = np.flatnonzero(counts > 0)
    n_rows = idx.shape[0]
    cap = 2 * n_rows + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    pos_w = np.zeros(cap)
    tot_w = np.zeros(cap)
    n_samp = np.zeros(cap, np.int64)

    w_row = np.empty(n_rows)
    for k in range(n_rows):
        w_row[k] = counts[idx[k]] * weights[idx[k]]

    stack_start = np.empty(cap, np.int64)
    stack_end = np.empty(cap, np.int64)
    stack_node = np.empty(cap, np.int64)
    sp = 0
    stack_start[0] = 0
    stack_end[0] = n_rows
    stack_node[0] = 0
    sp = 1
    n_nodes = 1
    perm = np.arange(n_features)
    rows = idx.copy()
    wr = w_row.copy()
    vals = np.empty(n_rows)
    tmp_rows = np.empty(n_rows, np.int64)
    tmp_w = np.empty(n_rows)

    while sp > 0:
        sp -= 1
        s = stack_start[sp]
        e = stack_end[sp]
        node = stack_node[sp]
        pw = 0.0
        tw = 0.0
        ns = 0
        for k in range(s, e):
            tw += wr[k]
            if y[rows[k]] == 1:
                pw += wr[k]
            ns += counts[rows[k]]
        pos_w[node] = pw
        tot_w[node] = tw
        n_samp[node] = ns
        if ns < min_samples_split or pw <= 0.0 or pw >= tw:
            continue

        # partial Fisher-Yates draw of candidate features
        for k in range(max_features):
            j = k + np.random.randint(0, n_features - k)
            t = perm[k]
            perm[k] = perm[j]
            perm[j] = t
        drawn = np.sort(perm[:max_features].copy())

        parent_imp = _gini(pw, tw)
        best_gain = -1.0
        best_f = -1
        best_thr = 0.0
        m = e - s
        for fi in range(drawn.shape[0]):
            f = drawn[fi]
            for k in range(m):
                vals[k] = X[rows[s + k], f]
            order = np.argsort(vals[:m], kind="mergesort")
            # boundaries between distinct sorted values
            nb = 0
            for k in range(m - 1):
                if vals[order[k]] < vals[order[k + 1]]:
                    nb += 1
            if nb == 0:
                continue
            bounds = np.empty(nb, np.int64)
            q = 0
            for k in range(m - 1):
                if vals[order[k]] < vals[order[k + 1]]:
                    bounds[q] = k
                    q += 1
            if nb > max_candidates:
                sel = np.empty(max_candidates, np.int64)
                for c in range(max_candidates):
                    sel[c] = bounds[((2 * c + 1) * nb) // (2 * max_candidates)]
                bounds = sel
            cum_p = 0.0
            cum_t = 0.0
            k = 0
            for c in range(bounds.shape[0]):
                b = bounds[c]
                while k <= b:
                    r_ = order[k]
                    cum_t += wr[s + r_]
                    if y[rows[s + r_]] == 1:
                        cum_p += wr[s + r_]
                    k += 1
                lt = cum_t
                rt = tw - cum_t
                if lt <= 0.0 or rt <= 0.0:
                    continue
                gain = parent_imp - (lt / tw) * _gini(cum_p, lt) - (rt / tw) * _gini(pw - cum_p, rt)
                if gain > best_gain:
                    lo_v = vals[order[b]]
                    hi_v = vals[order[b + 1]]
                    thr = 0.5 * (lo_v + hi_v)
                    if thr >= hi_v:
                        thr = lo_v
                    best_gain = gain
                    best_f = f
                    best_thr = thr
        if best_f < 0:
            continue

        # stable partition of rows[s:e] on X[:, best_f] <= best_thr
        nl = 0
        for k in range(s, e):
            if X[rows[k], best_f] <= best_thr:
                tmp_rows[nl] = rows[k]
                tmp_w[nl] = wr[k]
                nl += 1
        nr = nl
        for k in range(s, e):
            if X[rows[k], best_f] > best_thr:
                tmp_rows[nr] = rows[k]
                tmp_w[nr] = wr[k]
                nr += 1
        for k in range(m):
            rows[s + k] = tmp_rows[k]
            wr[s + k] = tmp_w[k]

        feature[node] = best_f
        threshold[node] = best_thr
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        left[node] = lnode
        right[node] = rnode
        # push right first so the left subtree is expanded first
        stack_start[sp] = s + nl
        stack_end[sp] = e
        stack_node[sp] = rnode
        sp += 1
        stack_start[sp] = s
        stack_end[sp] = s + nl
        stack_node[sp] = lnode
        sp += 1

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        pos_w[:n_nodes].copy(),
        tot_w[:n_nodes].copy(),
        n_samp[:n_nodes].copy(),
    )


@njit(cache=True)
def predict_forest(X, offsets, feature, threshold, left, right, leaf_value):
    """Mean leaf value over trees; node arrays are concatenated, children are tree-local."""
    n = X.shape[0]
    n_trees = offsets.shape[0] - 1
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for t in range(n_trees):
            base = offsets[t]
            node = 0
            while feature[base + node] >= 0:
                if X[i, feature[base + node]] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            acc += leaf_value[base + node]
        out[i] = acc / n_trees
    return out
