# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Semantics mirror ``stopwatt._purepy`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()


def lcs_length(const cnp.int64_t[::1] a, const cnp.int64_t[::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    if n == 0 or m == 0:
        return 0
    cdef cnp.int64_t[::1] prev = np.zeros(m + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] cur = np.zeros(m + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] tmp
    cdef cnp.int64_t ai
    with nogil:
        for i in range(n):
            ai = a[i]
            cur[0] = 0
            for j in range(m):
                if ai == b[j]:
                    cur[j + 1] = prev[j] + 1
                elif prev[j + 1] >= cur[j]:
                    cur[j + 1] = prev[j + 1]
                else:
                    cur[j + 1] = cur[j]
            tmp = prev
            prev = cur
            cur = tmp
    return int(prev[m])


cdef inline double _term(double G, double H, double lam) nogil:
    if H + lam <= 0.0:
        return 0.0
    return G * G / (H + lam)


def find_level_splits(
    const double[:, ::1] X,
    const cnp.int64_t[:, ::1] sorted_idx,
    const cnp.int64_t[::1] n_valid,
    const cnp.int64_t[:, ::1] missing_idx,
    const cnp.int64_t[::1] n_missing,
    const cnp.int64_t[::1] node_of_row,
    const double[::1] g,
    const double[::1] h,
    const double[::1] G_tot,
    const double[::1] H_tot,
    const cnp.int64_t[::1] features,
    double reg_lambda,
    double gamma,
    double min_child_weight,
):
    cdef Py_ssize_t n_nodes = G_tot.shape[0]
    best_score_a = np.zeros(n_nodes, dtype=np.float64)
    best_feature_a = np.full(n_nodes, -1, dtype=np.int64)
    best_threshold_a = np.zeros(n_nodes, dtype=np.float64)
    best_left_a = np.zeros(n_nodes, dtype=np.uint8)
    cdef double[::1] best_score = best_score_a
    cdef cnp.int64_t[::1] best_feature = best_feature_a
    cdef double[::1] best_threshold = best_threshold_a
    cdef cnp.uint8_t[::1] best_left = best_left_a

    cdef double[::1] Gv = np.zeros(n_nodes)
    cdef double[::1] Hv = np.zeros(n_nodes)
    cdef double[::1] Gm = np.zeros(n_nodes)
    cdef double[::1] Hm = np.zeros(n_nodes)
    cdef cnp.int64_t[::1] cm = np.zeros(n_nodes, dtype=np.int64)
    cdef double[::1] GL = np.zeros(n_nodes)
    cdef double[::1] HL = np.zeros(n_nodes)
    cdef double[::1] last = np.zeros(n_nodes)
    cdef cnp.uint8_t[::1] seen = np.zeros(n_nodes, dtype=np.uint8)
    cdef double[::1] parent = np.zeros(n_nodes)

    cdef Py_ssize_t fi, k, nd, q
    cdef cnp.int64_t f, r
    cdef double v, thr, lg, lh, rg, rh, score
    for nd in range(n_nodes):
        parent[nd] = _term(G_tot[nd], H_tot[nd], reg_lambda)

    with nogil:
        for fi in range(features.shape[0]):
            f = features[fi]
            for nd in range(n_nodes):
                Gv[nd] = 0.0; Hv[nd] = 0.0; Gm[nd] = 0.0; Hm[nd] = 0.0; cm[nd] = 0
                GL[nd] = 0.0; HL[nd] = 0.0; seen[nd] = 0
            for k in range(n_valid[f]):
                r = sorted_idx[f, k]
                nd = node_of_row[r]
                if nd >= 0:
                    Gv[nd] += g[r]
                    Hv[nd] += h[r]
            for k in range(n_missing[f]):
                r = missing_idx[f, k]
                nd = node_of_row[r]
                if nd >= 0:
                    Gm[nd] += g[r]
                    Hm[nd] += h[r]
                    cm[nd] += 1
            for k in range(n_valid[f]):
                r = sorted_idx[f, k]
                nd = node_of_row[r]
                if nd < 0:
                    continue
                v = X[r, f]
                if seen[nd] and v > last[nd]:
                    thr = (last[nd] + v) * 0.5
                    # missing values to the right
                    lg = GL[nd]; lh = HL[nd]
                    rg = Gv[nd] - GL[nd] + Gm[nd]; rh = Hv[nd] - HL[nd] + Hm[nd]
                    if lh >= min_child_weight and rh >= min_child_weight:
                        score = 0.5 * (_term(lg, lh, reg_lambda) + _term(rg, rh, reg_lambda) - parent[nd]) - gamma
                        if score > best_score[nd]:
                            best_score[nd] = score
                            best_feature[nd] = f
                            best_threshold[nd] = thr
                            best_left[nd] = 0
                    if cm[nd] > 0:
                        lg = GL[nd] + Gm[nd]; lh = HL[nd] + Hm[nd]
                        rg = Gv[nd] - GL[nd]; rh = Hv[nd] - HL[nd]
                        if lh >= min_child_weight and rh >= min_child_weight:
                            score = 0.5 * (_term(lg, lh, reg_lambda) + _term(rg, rh, reg_lambda) - parent[nd]) - gamma
                            if score > best_score[nd]:
                                best_score[nd] = score
                                best_feature[nd] = f
                                best_threshold[nd] = thr
                                best_left[nd] = 1
                GL[nd] += g[r]
                HL[nd] += h[r]
                last[nd] = v
                seen[nd] = 1
    return best_feature_a, best_threshold_a, best_left_a.astype(bool), best_score_a


def predict_tree(
    const double[:, ::1] X,
    const cnp.int64_t[::1] feature,
    const double[::1] threshold,
    const cnp.uint8_t[::1] default_left,
    const cnp.int64_t[::1] left,
    const cnp.int64_t[::1] right,
    const double[::1] value,
):
    """Leaf value reached by every row of ``X``."""
    cdef Py_ssize_t n = X.shape[0], i
    cdef cnp.int64_t node
    cdef double v
    out_a = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_a
    with nogil:
        for i in range(n):
            node = 0
            while left[node] >= 0:
                v = X[i, feature[node]]
                if v != v:
                    node = left[node] if default_left[node] else right[node]
                elif v < threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            out[i] = value[node]
    return out_a


cdef struct PathElement:
    Py_ssize_t feature
    double zero
    double one
    double weight


cdef void _extend(PathElement* path, Py_ssize_t depth, double zero, double one, Py_ssize_t feature) nogil:
    cdef Py_ssize_t i
    path[depth].feature = feature
    path[depth].zero = zero
    path[depth].one = one
    path[depth].weight = 1.0 if depth == 0 else 0.0
    i = depth - 1
    while i >= 0:
        path[i + 1].weight += one * path[i].weight * (i + 1) / <double>(depth + 1)
        path[i].weight = zero * path[i].weight * (depth - i) / <double>(depth + 1)
        i -= 1


cdef void _unwind(PathElement* path, Py_ssize_t depth, Py_ssize_t index) nogil:
    cdef double one = path[index].one, zero = path[index].zero
    cdef double nxt = path[depth].weight, tmp
    cdef Py_ssize_t i = depth - 1
    while i >= 0:
        if one != 0.0:
            tmp = path[i].weight
            path[i].weight = nxt * (depth + 1) / ((i + 1) * one)
            nxt = tmp - path[i].weight * zero * (depth - i) / <double>(depth + 1)
        else:
            path[i].weight = path[i].weight * (depth + 1) / (zero * (depth - i))
        i -= 1
    for i in range(index, depth):
        path[i].feature = path[i + 1].feature
        path[i].zero = path[i + 1].zero
        path[i].one = path[i + 1].one


cdef double _unwound_sum(PathElement* path, Py_ssize_t depth, Py_ssize_t index) nogil:
    cdef double one = path[index].one, zero = path[index].zero
    cdef double nxt = path[depth].weight, total = 0.0, tmp
    cdef Py_ssize_t i = depth - 1
    while i >= 0:
        if one != 0.0:
            tmp = nxt * (depth + 1) / ((i + 1) * one)
            total += tmp
            nxt = path[i].weight - tmp * zero * (depth - i) / <double>(depth + 1)
        else:
            total += path[i].weight * (depth + 1) / (zero * (depth - i))
        i -= 1
    return total


cdef void _recurse(
    const double* x,
    const cnp.int64_t* feature, const double* threshold, const cnp.uint8_t* default_left,
    const cnp.int64_t* left, const cnp.int64_t* right, const double* value, const double* cover,
    double* phi, Py_ssize_t node, Py_ssize_t depth, PathElement* parent_path,
    double zero, double one, Py_ssize_t parent_feature,
) nogil:
    cdef PathElement* path = parent_path + depth + 1
    cdef Py_ssize_t i, k, hot, cold, f
    cdef double w, v, inc_zero = 1.0, inc_one = 1.0
    for i in range(depth + 1):
        path[i] = parent_path[i]
    _extend(path, depth, zero, one, parent_feature)
    if left[node] < 0:
        for i in range(1, depth + 1):
            w = _unwound_sum(path, depth, i)
            phi[path[i].feature] += w * (path[i].one - path[i].zero) * value[node]
        return
    f = feature[node]
    v = x[f]
    if v != v:
        hot = left[node] if default_left[node] else right[node]
    elif v < threshold[node]:
        hot = left[node]
    else:
        hot = right[node]
    cold = right[node] if hot == left[node] else left[node]
    k = 0
    while k <= depth:
        if path[k].feature == f:
            break
        k += 1
    if k != depth + 1:
        inc_zero = path[k].zero
        inc_one = path[k].one
        _unwind(path, depth, k)
        depth -= 1
    _recurse(x, feature, threshold, default_left, left, right, value, cover, phi,
             hot, depth + 1, path, cover[hot] / cover[node] * inc_zero, inc_one, f)
    _recurse(x, feature, threshold, default_left, left, right, value, cover, phi,
             cold, depth + 1, path, cover[cold] / cover[node] * inc_zero, 0.0, f)


def tree_shap(
    const double[:, ::1] X,
    const cnp.int64_t[::1] feature,
    const double[::1] threshold,
    const cnp.uint8_t[::1] default_left,
    const cnp.int64_t[::1] left,
    const cnp.int64_t[::1] right,
    const double[::1] value,
    const double[::1] cover,
    Py_ssize_t max_depth,
    double[:, ::1] phi,
):
    """Add path-dependent Shapley values of one tree into ``phi`` (rows x features)."""
    cdef Py_ssize_t n = X.shape[0], i
    cdef Py_ssize_t size = (max_depth + 2) * (max_depth + 3) // 2
    cdef PathElement* buf = <PathElement*> malloc(size * sizeof(PathElement))
    if buf == NULL:
        raise MemoryError()
    try:
        with nogil:
            for i in range(n):
                _recurse(&X[i, 0], &feature[0], &threshold[0], &default_left[0], &left[0], &right[0],
                         &value[0], &cover[0], &phi[i, 0], 0, 0, buf, 1.0, 1.0, -1)
    finally:
        free(buf)
