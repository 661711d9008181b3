"""Reference implementations of the compiled kernels in ``_native.pyx``.

Each function matches its compiled twin operation for operation so that the
two backends produce the same floating-point results.
"""

from __future__ import annotations

import numpy as np


def lcs_length(a, b) -> int:
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        return 0
    a = list(a)
    b = list(b)
    prev = [0] * (m + 1)
    for i in range(n):
        ai = a[i]
        cur = [0] * (m + 1)
        for j in range(m):
            if ai == b[j]:
                cur[j + 1] = prev[j] + 1
            elif prev[j + 1] >= cur[j]:
                cur[j + 1] = prev[j + 1]
            else:
                cur[j + 1] = cur[j]
        prev = cur
    return prev[m]


def _term(G, H, lam):
    denom = H + lam
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(denom > 0.0, G * G / np.where(denom > 0.0, denom, 1.0), 0.0)
    return out


def find_level_splits(X, sorted_idx, n_valid, missing_idx, n_missing, node_of_row,
                      g, h, G_tot, H_tot, features, reg_lambda, gamma, min_child_weight):
    n_nodes = len(G_tot)
    best_score = np.zeros(n_nodes)
    best_feature = np.full(n_nodes, -1, dtype=np.int64)
    best_threshold = np.zeros(n_nodes)
    best_left = np.zeros(n_nodes, dtype=bool)
    parent = _term(np.asarray(G_tot), np.asarray(H_tot), reg_lambda)

    for f in features:
        rows = sorted_idx[f, : n_valid[f]]
        nodes = node_of_row[rows]
        rows, nodes = rows[nodes >= 0], nodes[nodes >= 0]
        mrows = missing_idx[f, : n_missing[f]]
        mnodes = node_of_row[mrows]
        mrows, mnodes = mrows[mnodes >= 0], mnodes[mnodes >= 0]
        order = np.argsort(nodes, kind="stable")
        rows, nodes = rows[order], nodes[order]
        morder = np.argsort(mnodes, kind="stable")
        mrows, mnodes = mrows[morder], mnodes[morder]
        for nd in np.unique(nodes):
            seg = rows[nodes == nd]
            vals = X[seg, f]
            cg, ch = np.cumsum(g[seg]), np.cumsum(h[seg])
            mseg = mrows[mnodes == nd]
            if mseg.size:
                Gm, Hm = np.cumsum(g[mseg])[-1], np.cumsum(h[mseg])[-1]
            else:
                Gm = Hm = 0.0
            Gv, Hv = cg[-1], ch[-1]
            cut = np.flatnonzero(vals[1:] > vals[:-1])
            if cut.size == 0:
                continue
            thr = (vals[cut] + vals[cut + 1]) * 0.5
            GL, HL = cg[cut], ch[cut]

            scores = np.full((cut.size, 2), -np.inf)
            # column 0: missing right, column 1: missing left
            lg, lh = GL, HL
            rg, rh = Gv - GL + Gm, Hv - HL + Hm
            ok = (lh >= min_child_weight) & (rh >= min_child_weight)
            s = 0.5 * (_term(lg, lh, reg_lambda) + _term(rg, rh, reg_lambda) - parent[nd]) - gamma
            scores[ok, 0] = s[ok]
            if mseg.size:
                lg, lh = GL + Gm, HL + Hm
                rg, rh = Gv - GL, Hv - HL
                ok = (lh >= min_child_weight) & (rh >= min_child_weight)
                s = 0.5 * (_term(lg, lh, reg_lambda) + _term(rg, rh, reg_lambda) - parent[nd]) - gamma
                scores[ok, 1] = s[ok]
            flat = scores.ravel()
            j = int(np.argmax(flat))
            if flat[j] > best_score[nd]:
                best_score[nd] = flat[j]
                best_feature[nd] = f
                best_threshold[nd] = thr[j // 2]
                best_left[nd] = bool(j % 2)
    return best_feature, best_threshold, best_left, best_score


def predict_tree(X, feature, threshold, default_left, left, right, value):
    n = X.shape[0]
    node = np.zeros(n, dtype=np.int64)
    active = left[node] >= 0
    while active.any():
        idx = np.flatnonzero(active)
        nd = node[idx]
        v = X[idx, feature[nd]]
        go_left = np.where(np.isnan(v), default_left[nd].astype(bool), v < threshold[nd])
        node[idx] = np.where(go_left, left[nd], right[nd])
        active = left[node] >= 0
    return value[node].astype(float)


class _Elem:
    __slots__ = ("feature", "zero", "one", "weight")

    def __init__(self, feature=-1, zero=0.0, one=0.0, weight=0.0):
        self.feature, self.zero, self.one, self.weight = feature, zero, one, weight

    def copy(self):
        return _Elem(self.feature, self.zero, self.one, self.weight)


def _extend(path, depth, zero, one, feature):
    path[depth] = _Elem(feature, zero, one, 1.0 if depth == 0 else 0.0)
    for i in range(depth - 1, -1, -1):
        path[i + 1].weight += one * path[i].weight * (i + 1) / float(depth + 1)
        path[i].weight = zero * path[i].weight * (depth - i) / float(depth + 1)


def _unwind(path, depth, index):
    one, zero = path[index].one, path[index].zero
    nxt = path[depth].weight
    for i in range(depth - 1, -1, -1):
        if one != 0.0:
            tmp = path[i].weight
            path[i].weight = nxt * (depth + 1) / ((i + 1) * one)
            nxt = tmp - path[i].weight * zero * (depth - i) / float(depth + 1)
        else:
            path[i].weight = path[i].weight * (depth + 1) / (zero * (depth - i))
    for i in range(index, depth):
        path[i].feature = path[i + 1].feature
        path[i].zero = path[i + 1].zero
        path[i].one = path[i + 1].one


def _unwound_sum(path, depth, index):
    one, zero = path[index].one, path[index].zero
    nxt = path[depth].weight
    total = 0.0
    for i in range(depth - 1, -1, -1):
        if one != 0.0:
            tmp = nxt * (depth + 1) / ((i + 1) * one)
            total += tmp
            nxt = path[i].weight - tmp * zero * (depth - i) / float(depth + 1)
        else:
            total += path[i].weight * (depth + 1) / (zero * (depth - i))
    return total


def tree_shap(X, feature, threshold, default_left, left, right, value, cover, max_depth, phi):
    """Add path-dependent Shapley values of one tree into ``phi`` (rows x features)."""

    def recurse(x, out, node, depth, parent_path, zero, one, parent_feature):
        path = [e.copy() for e in parent_path[:depth]] + [None]
        _extend(path, depth, zero, one, parent_feature)
        if left[node] < 0:
            for i in range(1, depth + 1):
                w = _unwound_sum(path, depth, i)
                out[path[i].feature] += w * (path[i].one - path[i].zero) * value[node]
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
        inc_zero = inc_one = 1.0
        k = next((k for k in range(depth + 1) if path[k].feature == f), depth + 1)
        if k != depth + 1:
            inc_zero, inc_one = path[k].zero, path[k].one
            _unwind(path, depth, k)
            depth -= 1
        recurse(x, out, hot, depth + 1, path, cover[hot] / cover[node] * inc_zero, inc_one, f)
        recurse(x, out, cold, depth + 1, path, cover[cold] / cover[node] * inc_zero, 0.0, f)

    for i in range(X.shape[0]):
        recurse(X[i], phi[i], 0, 0, [], 1.0, 1.0, -1)
