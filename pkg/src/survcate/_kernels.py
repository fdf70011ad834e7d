"""Compiled tree builders and traversal kernels.

Trees are stored as flat parallel arrays (``feature``, ``threshold``, ``left``,
``right``) with ``feature == -1`` marking leaves. A sample goes left when
``x[feature] <= threshold``.

Feature sampling at node ``k`` takes the ``mtry`` columns with the smallest
``keys[k, j]``; ineligible columns carry ``inf`` keys. Ties between equally
good splits go to the column with the smaller key, which keeps fits
independent of column order.
"""

import numpy as np
from numba import njit

_EPS = 1e-12


@njit(cache=True, nogil=True)
def _candidate_features(keys_row, mtry):
    order = np.argsort(keys_row, kind="mergesort")
    out = np.empty(mtry, dtype=np.int64)
    n = 0
    for j in order:
        if n == mtry or not np.isfinite(keys_row[j]):
            break
        out[n] = j
        n += 1
    return out[:n]


@njit(cache=True, nogil=True)
def _partition(idx, start, end, X, f, thr):
    """Stable in-place partition of idx[start:end] by X[:, f] <= thr."""
    buf = idx[start:end].copy()
    lo = start
    for r in buf:
        if X[r, f] <= thr:
            idx[lo] = r
            lo += 1
    hi = lo
    for r in buf:
        if X[r, f] > thr:
            idx[hi] = r
            hi += 1
    return lo


@njit(cache=True, nogil=True)
def build_regression_tree(X, y, w, rows, keys, mtry, min_leaf_weight,
                          min_leaf_samples, max_depth):
    """Weighted least-squares CART on the (possibly duplicated) ``rows``."""
    m_total = rows.shape[0]
    cap = 2 * m_total + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    idx = rows.copy()

    st_node = np.empty(cap, dtype=np.int64)
    st_start = np.empty(cap, dtype=np.int64)
    st_end = np.empty(cap, dtype=np.int64)
    st_depth = np.empty(cap, dtype=np.int64)
    sp = 0
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = m_total
    st_depth[0] = 0
    sp = 1
    n_nodes = 1

    while sp > 0:
        sp -= 1
        node = st_node[sp]
        s = st_start[sp]
        e = st_end[sp]
        depth = st_depth[sp]
        m = e - s

        W = 0.0
        S = 0.0
        ymin = np.inf
        ymax = -np.inf
        for i in range(s, e):
            r = idx[i]
            W += w[r]
            S += w[r] * y[r]
            if y[r] < ymin:
                ymin = y[r]
            if y[r] > ymax:
                ymax = y[r]
        value[node] = S / W

        if (max_depth >= 0 and depth >= max_depth) or m < 2 * min_leaf_samples \
                or W < 2.0 * min_leaf_weight or ymax - ymin <= _EPS * (1.0 + abs(ymax)):
            continue

        parent = S * S / W
        best = parent + _EPS * (1.0 + abs(parent))
        best_f = -1
        best_thr = 0.0
        cands = _candidate_features(keys[node], mtry)
        xs = np.empty(m)
        for f in cands:
            for i in range(m):
                xs[i] = X[idx[s + i], f]
            order = np.argsort(xs, kind="mergesort")
            WL = 0.0
            SL = 0.0
            for i in range(m - 1):
                r = idx[s + order[i]]
                WL += w[r]
                SL += w[r] * y[r]
                x_here = xs[order[i]]
                x_next = xs[order[i + 1]]
                if x_here == x_next:
                    continue
                if i + 1 < min_leaf_samples or m - i - 1 < min_leaf_samples:
                    continue
                WR = W - WL
                if WL < min_leaf_weight or WR < min_leaf_weight or WL <= 0.0 or WR <= 0.0:
                    continue
                SR = S - SL
                score = SL * SL / WL + SR * SR / WR
                if score > best:
                    best = score
                    best_f = f
                    best_thr = 0.5 * (x_here + x_next)
                    if best_thr == x_next:
                        best_thr = x_here
        if best_f < 0:
            continue

        mid = _partition(idx, s, e, X, best_f, best_thr)
        feature[node] = best_f
        threshold[node] = best_thr
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        left[node] = lnode
        right[node] = rnode
        st_node[sp] = rnode
        st_start[sp] = mid
        st_end[sp] = e
        st_depth[sp] = depth + 1
        sp += 1
        st_node[sp] = lnode
        st_start[sp] = s
        st_end[sp] = mid
        st_depth[sp] = depth + 1
        sp += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy())


@njit(cache=True, nogil=True)
def _nelson_aalen(times, events):
    """Distinct event times and cumulative hazard (tied events handled discretely)."""
    m = times.shape[0]
    order = np.argsort(times, kind="mergesort")
    t_sorted = times[order]
    e_sorted = events[order]
    out_t = np.empty(m)
    out_h = np.empty(m)
    k = 0
    H = 0.0
    i = 0
    while i < m:
        t = t_sorted[i]
        at_risk = m - i
        d = 0
        j = i
        while j < m and t_sorted[j] == t:
            d += e_sorted[j]
            j += 1
        if d > 0:
            H += d / at_risk
            out_t[k] = t
            out_h[k] = H
            k += 1
        i = j
    return out_t[:k].copy(), out_h[:k].copy()


@njit(cache=True, nogil=True)
def build_survival_tree(X, time, event, rows, keys, mtry, min_leaf_events, max_depth):
    """Log-rank survival tree; leaves carry Nelson-Aalen cumulative hazards.

    For each candidate column the samples are swept in feature order while the
    log-rank numerator and hypergeometric variance of the left child are
    updated incrementally.
    """
    m_total = rows.shape[0]
    cap = 2 * m_total + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    leaf_start = np.zeros(cap, dtype=np.int64)
    leaf_end = np.zeros(cap, dtype=np.int64)
    chf_t = np.empty(m_total)
    chf_h = np.empty(m_total)
    n_chf = 0
    idx = rows.copy()

    st_node = np.empty(cap, dtype=np.int64)
    st_start = np.empty(cap, dtype=np.int64)
    st_end = np.empty(cap, dtype=np.int64)
    st_depth = np.empty(cap, dtype=np.int64)
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = m_total
    st_depth[0] = 0
    sp = 1
    n_nodes = 1

    while sp > 0:
        sp -= 1
        node = st_node[sp]
        s = st_start[sp]
        e = st_end[sp]
        depth = st_depth[sp]
        m = e - s

        t_node = np.empty(m)
        d_node = np.empty(m, dtype=np.int64)
        tot_ev = 0
        for i in range(m):
            t_node[i] = time[idx[s + i]]
            d_node[i] = event[idx[s + i]]
            tot_ev += d_node[i]

        best_f = -1
        best_thr = 0.0
        splittable = not (max_depth >= 0 and depth >= max_depth) and tot_ev >= 2 * min_leaf_events
        if splittable:
            # distinct event times in the node
            ev_t = np.empty(tot_ev)
            k = 0
            for i in range(m):
                if d_node[i] == 1:
                    ev_t[k] = t_node[i]
                    k += 1
            ev_t = np.unique(ev_t)
            D = ev_t.shape[0]
            r = np.searchsorted(ev_t, t_node, side="right")
            Y = np.zeros(D)
            dk = np.zeros(D)
            for i in range(m):
                if r[i] > 0:
                    Y[r[i] - 1] += 1.0
                if d_node[i] == 1:
                    dk[r[i] - 1] += 1.0
            for kk in range(D - 2, -1, -1):
                Y[kk] += Y[kk + 1]
            Ep = np.zeros(D + 1)
            Cp = np.zeros(D + 1)
            a = np.zeros(D)
            for kk in range(D):
                ek = dk[kk] / Y[kk]
                ck = 0.0
                if Y[kk] > 1.0:
                    ck = dk[kk] * (Y[kk] - dk[kk]) / ((Y[kk] - 1.0) * Y[kk])
                a[kk] = ck / Y[kk]
                Ep[kk + 1] = Ep[kk] + ek
                Cp[kk + 1] = Cp[kk] + ck

            best = 0.0
            cands = _candidate_features(keys[node], mtry)
            xs = np.empty(m)
            YL = np.zeros(D)
            for f in cands:
                for i in range(m):
                    xs[i] = X[idx[s + i], f]
                order = np.argsort(xs, kind="mergesort")
                YL[:] = 0.0
                num = 0.0
                v1 = 0.0
                q = 0.0
                evL = 0
                for i in range(m - 1):
                    o = order[i]
                    ri = r[o]
                    dq = 0.0
                    for kk in range(ri):
                        dq += a[kk] * (2.0 * YL[kk] + 1.0)
                        YL[kk] += 1.0
                    q += dq
                    num += d_node[o] - Ep[ri]
                    v1 += Cp[ri]
                    evL += d_node[o]
                    x_here = xs[o]
                    x_next = xs[order[i + 1]]
                    if x_here == x_next:
                        continue
                    if evL < min_leaf_events or tot_ev - evL < min_leaf_events:
                        continue
                    var = v1 - q
                    if var <= _EPS:
                        continue
                    score = num * num / var
                    if score > best * (1.0 + 1e-12) + _EPS:
                        best = score
                        best_f = f
                        best_thr = 0.5 * (x_here + x_next)
                        if best_thr == x_next:
                            best_thr = x_here

        if best_f < 0:
            lt, lh = _nelson_aalen(t_node, d_node)
            leaf_start[node] = n_chf
            for kk in range(lt.shape[0]):
                chf_t[n_chf] = lt[kk]
                chf_h[n_chf] = lh[kk]
                n_chf += 1
            leaf_end[node] = n_chf
            continue

        mid = _partition(idx, s, e, X, best_f, best_thr)
        feature[node] = best_f
        threshold[node] = best_thr
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        left[node] = lnode
        right[node] = rnode
        st_node[sp] = rnode
        st_start[sp] = mid
        st_end[sp] = e
        st_depth[sp] = depth + 1
        sp += 1
        st_node[sp] = lnode
        st_start[sp] = s
        st_end[sp] = mid
        st_depth[sp] = depth + 1
        sp += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), leaf_start[:n_nodes].copy(), leaf_end[:n_nodes].copy(),
            chf_t[:n_chf].copy(), chf_h[:n_chf].copy())


@njit(cache=True, nogil=True)
def _leaf(X, i, root, feature, threshold, left, right):
    node = root
    f = feature[node]
    while f >= 0:
        if X[i, f] <= threshold[node]:
            node = left[node]
        else:
            node = right[node]
        f = feature[node]
    return node


@njit(cache=True, nogil=True)
def predict_regression(X, roots, feature, threshold, left, right, value, tree_mask):
    """Mean leaf value over trees; ``tree_mask[i, t]`` False skips tree t for row i.

    Rows with no usable tree get NaN. Loops tree-major so one tree's nodes
    stay in cache while all rows pass through it.
    """
    n = X.shape[0]
    T = roots.shape[0]
    acc = np.zeros(n)
    cnt = np.zeros(n)
    use_mask = tree_mask.shape[0] == n
    for t in range(T):
        root = roots[t]
        for i in range(n):
            if use_mask and not tree_mask[i, t]:
                continue
            acc[i] += value[_leaf(X, i, root, feature, threshold, left, right)]
            cnt[i] += 1.0
    out = np.empty(n)
    for i in range(n):
        out[i] = acc[i] / cnt[i] if cnt[i] > 0 else np.nan
    return out


@njit(cache=True, nogil=True)
def predict_chf(X, times, roots, feature, threshold, left, right,
                leaf_start, leaf_end, chf_t, chf_h, tree_mask):
    """Ensemble-mean cumulative hazard at each of ``times`` (right-continuous steps)."""
    n = X.shape[0]
    T = roots.shape[0]
    G = times.shape[0]
    out = np.zeros((n, G))
    cnt = np.zeros(n)
    use_mask = tree_mask.shape[0] == n
    for t in range(T):
        root = roots[t]
        for i in range(n):
            if use_mask and not tree_mask[i, t]:
                continue
            leaf = _leaf(X, i, root, feature, threshold, left, right)
            a = leaf_start[leaf]
            b = leaf_end[leaf]
            for g in range(G):
                pos = np.searchsorted(chf_t[a:b], times[g], side="right")
                if pos > 0:
                    out[i, g] += chf_h[a + pos - 1]
            cnt[i] += 1.0
    for i in range(n):
        for g in range(G):
            if cnt[i] > 0:
                out[i, g] /= cnt[i]
            else:
                out[i, g] = np.nan
    return out
