"""Gradient-boosted decision trees for binary classification.

Second-order boosting on the logistic loss with exact greedy split search,
learned default directions for missing values (NaN), row/column subsampling,
min-loss-reduction pruning and path-dependent tree Shapley attributions.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.special import expit

from . import kernels

SCHEMA_VERSION = 1


class GBDTError(ValueError):
    pass


@dataclass(frozen=True)
class HyperParams:
    max_depth: int = 3
    learning_rate: float = 0.1
    min_child_weight: float = 1.0
    subsample: float = 1.0
    colsample: float = 1.0
    gamma: float = 0.0
    l2_lambda: float = 1.0
    rounds: int = 100
    pos_weight: float = 1.0

    def with_rounds(self, rounds: int) -> "HyperParams":
        return HyperParams(**{**asdict(self), "rounds": int(rounds)})

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "HyperParams":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in known})


@dataclass
class TreeNode:
    """Nested view of one tree node; ``weight`` is set on leaves only."""

    cover: float
    weight: float | None = None
    feature_index: int = -1
    threshold: float = 0.0
    default_left: bool = False
    gain: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


class Tree:
    """Flat array form of a regression tree (node 0 is the root, -1 marks no child)."""

    def __init__(self, feature, threshold, default_left, left, right, value, gain, cover):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.default_left = np.asarray(default_left, dtype=np.uint8)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=np.float64)
        self.gain = np.asarray(gain, dtype=np.float64)
        self.cover = np.asarray(cover, dtype=np.float64)
        self.depth = self._depth(0)

    def _depth(self, node: int) -> int:
        if self.left[node] < 0:
            return 0
        return 1 + max(self._depth(self.left[node]), self._depth(self.right[node]))

    @property
    def n_nodes(self) -> int:
        return len(self.value)

    @property
    def n_internal(self) -> int:
        return int(np.sum(self.left >= 0))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return kernels.predict_tree(
            X, self.feature, self.threshold, self.default_left, self.left, self.right, self.value
        )

    def expected_value(self) -> float:
        """Cover-weighted mean leaf value, using the same ratios as the Shapley recursion."""

        def walk(node: int) -> float:
            if self.left[node] < 0:
                return float(self.value[node])
            lc, rc = self.left[node], self.right[node]
            c = self.cover[node]
            return self.cover[lc] / c * walk(lc) + self.cover[rc] / c * walk(rc)

        return walk(0)

    def to_node(self, node: int = 0) -> TreeNode:
        if self.left[node] < 0:
            return TreeNode(cover=float(self.cover[node]), weight=float(self.value[node]))
        return TreeNode(
            cover=float(self.cover[node]),
            feature_index=int(self.feature[node]),
            threshold=float(self.threshold[node]),
            default_left=bool(self.default_left[node]),
            gain=float(self.gain[node]),
            left=self.to_node(self.left[node]),
            right=self.to_node(self.right[node]),
        )

    @classmethod
    def from_node(cls, root: TreeNode) -> "Tree":
        cols: dict[str, list] = {k: [] for k in ("feature", "threshold", "default_left", "left", "right", "value", "gain", "cover")}

        def add(node: TreeNode) -> int:
            idx = len(cols["value"])
            for k in cols:
                cols[k].append(0)
            cols["cover"][idx] = node.cover
            if node.is_leaf:
                cols["feature"][idx] = -1
                cols["left"][idx] = cols["right"][idx] = -1
                cols["value"][idx] = node.weight
                return idx
            cols["feature"][idx] = node.feature_index
            cols["threshold"][idx] = node.threshold
            cols["default_left"][idx] = int(node.default_left)
            cols["gain"][idx] = node.gain
            cols["left"][idx] = add(node.left)
            cols["right"][idx] = add(node.right)
            return idx

        add(root)
        return cls(**cols)


def _node_to_dict(node: TreeNode) -> dict[str, Any]:
    if node.is_leaf:
        return {"leaf": node.weight, "cover": node.cover}
    return {
        "split": node.feature_index,
        "threshold": node.threshold,
        "default_left": node.default_left,
        "gain": node.gain,
        "cover": node.cover,
        "left": _node_to_dict(node.left),
        "right": _node_to_dict(node.right),
    }


def _node_from_dict(doc: dict[str, Any]) -> TreeNode:
    if "leaf" in doc:
        return TreeNode(cover=float(doc["cover"]), weight=float(doc["leaf"]))
    return TreeNode(
        cover=float(doc["cover"]),
        feature_index=int(doc["split"]),
        threshold=float(doc["threshold"]),
        default_left=bool(doc["default_left"]),
        gain=float(doc["gain"]),
        left=_node_from_dict(doc["left"]),
        right=_node_from_dict(doc["right"]),
    )


@dataclass
class BoostedModel:
    trees: list[Tree]
    base_margin: float
    hyperparams: HyperParams
    feature_count: int
    feature_names: list[str] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)

    def _check(self, X) -> np.ndarray:
        X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
        if X.shape[1] != self.feature_count:
            raise GBDTError(f"expected {self.feature_count} features, got {X.shape[1]}")
        return X

    def predict_margin(self, X) -> np.ndarray:
        X = self._check(X)
        out = np.full(X.shape[0], self.base_margin)
        for tree in self.trees:
            out += tree.predict(X)
        return out

    def predict_proba(self, X) -> np.ndarray:
        # clip keeps the result strictly inside (0, 1) in float64
        return np.clip(expit(self.predict_margin(X)), 1e-16, 1.0 - 1e-16)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "hyperparams": asdict(self.hyperparams),
            "base_margin": self.base_margin,
            "feature_count": self.feature_count,
            "feature_names": list(self.feature_names),
            "metadata": self.metadata,
            "trees": [_node_to_dict(t.to_node()) for t in self.trees],
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "BoostedModel":
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise GBDTError(f"unsupported model schema_version {doc.get('schema_version')}")
        return cls(
            trees=[Tree.from_node(_node_from_dict(t)) for t in doc["trees"]],
            base_margin=float(doc["base_margin"]),
            hyperparams=HyperParams.from_dict(doc["hyperparams"]),
            feature_count=int(doc["feature_count"]),
            feature_names=list(doc.get("feature_names", [])),
            metadata=dict(doc.get("metadata", {})),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "BoostedModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# --------------------------------------------------------------------------- training

def _as_xy(X, y):
    if y is None:
        # FeatureMatrix-like input
        X, y = X.X, X.y
    X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise GBDTError("X must be 2-D with one label per row")
    return X, y


class Booster:
    """Incremental trainer; ``grow(r)`` continues boosting to ``r`` rounds total.

    Round ``i`` draws its row and column samples from ``(seed, i)``, so a model
    grown to 30 rounds in two calls equals one grown in a single call.
    """

    def __init__(self, X, y, params: HyperParams, seed: int = 0, feature_names: Sequence[str] | None = None):
        X, y = _as_xy(X, y)
        n, m = X.shape
        if n < 2:
            raise GBDTError("need at least 2 rows")
        if m == 0:
            raise GBDTError("zero features")
        if not np.all((y == 0) | (y == 1)):
            raise GBDTError("labels must be 0/1")
        if y.min() == y.max():
            raise GBDTError("single-class labels")
        self.X, self.y, self.params, self.seed = X, y, params, int(seed)
        self.weight = np.where(y == 1, params.pos_weight, 1.0)
        ybar = float(np.sum(self.weight * y) / np.sum(self.weight))
        self.base_margin = math.log(ybar / (1.0 - ybar))
        self.margin = np.full(n, self.base_margin)
        self.trees: list[Tree] = []
        self.feature_names = list(feature_names) if feature_names is not None else [f"f{i}" for i in range(m)]

        nan = np.isnan(X)
        self.n_valid = (~nan).sum(axis=0).astype(np.int64)
        self.n_missing = nan.sum(axis=0).astype(np.int64)
        self.sorted_idx = np.zeros((m, n), dtype=np.int64)
        self.missing_idx = np.zeros((m, n), dtype=np.int64)
        for f in range(m):
            valid = np.flatnonzero(~nan[:, f])
            order = valid[np.argsort(X[valid, f], kind="stable")]
            self.sorted_idx[f, : order.size] = order
            miss = np.flatnonzero(nan[:, f])
            self.missing_idx[f, : miss.size] = miss
        self._evals: list[tuple[np.ndarray, np.ndarray]] = []

    def add_eval(self, X) -> int:
        """Track margins of another matrix as trees are added; returns its handle."""
        X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
        margin = np.full(X.shape[0], self.base_margin)
        for t in self.trees:
            margin += t.predict(X)
        self._evals.append((X, margin))
        return len(self._evals) - 1

    def eval_margin(self, handle: int) -> np.ndarray:
        return self._evals[handle][1]

    @property
    def rounds(self) -> int:
        return len(self.trees)

    def grow(self, rounds: int) -> "Booster":
        while len(self.trees) < rounds:
            tree = self._round(len(self.trees))
            self.trees.append(tree)
            self.margin += tree.predict(self.X)
            for X, margin in self._evals:
                margin += tree.predict(X)
        return self

    def model(self, metadata: dict[str, Any] | None = None) -> BoostedModel:
        return BoostedModel(
            trees=list(self.trees),
            base_margin=self.base_margin,
            hyperparams=self.params.with_rounds(len(self.trees)),
            feature_count=self.X.shape[1],
            feature_names=list(self.feature_names),
            metadata=dict(metadata or {}),
        )

    def _round(self, index: int) -> Tree:
        prm = self.params
        n, m = self.X.shape
        rng = np.random.default_rng([self.seed, index])
        p = expit(self.margin)
        g = (p - self.y) * self.weight
        h = p * (1.0 - p) * self.weight
        if prm.subsample < 1.0:
            k = max(1, int(math.floor(prm.subsample * n + 0.5)))
            rows = np.sort(rng.choice(n, size=k, replace=False))
        else:
            rows = np.arange(n)
        if prm.colsample < 1.0:
            k = max(1, int(math.floor(prm.colsample * m + 0.5)))
            feats = np.sort(rng.choice(m, size=k, replace=False)).astype(np.int64)
        else:
            feats = np.arange(m, dtype=np.int64)
        return grow_tree(self, g, h, rows, feats)


def grow_tree(b: Booster, g: np.ndarray, h: np.ndarray, rows: np.ndarray, feats: np.ndarray) -> Tree:
    """Grow one tree level by level on ``rows`` using candidate features ``feats``."""
    prm = b.params
    lam, lr = prm.l2_lambda, prm.learning_rate
    n = b.X.shape[0]
    node_of_row = np.full(n, -1, dtype=np.int64)
    node_of_row[rows] = 0
    cols: dict[str, list] = {k: [0] for k in ("feature", "threshold", "default_left", "left", "right", "value", "gain", "cover")}
    frontier = [0]
    depth = 0
    while frontier:
        active = node_of_row >= 0
        idx = node_of_row[active]
        G = np.bincount(idx, weights=g[active], minlength=len(frontier))
        H = np.bincount(idx, weights=h[active], minlength=len(frontier))
        if depth < prm.max_depth:
            bf, bt, bl, bs = kernels.find_level_splits(
                b.X, b.sorted_idx, b.n_valid, b.missing_idx, b.n_missing, node_of_row,
                g, h, G, H, feats, lam, prm.gamma, prm.min_child_weight,
            )
        else:
            bf = np.full(len(frontier), -1)
        child_local = np.full((len(frontier), 2), -1, dtype=np.int64)
        next_frontier = []
        for li, nid in enumerate(frontier):
            cols["cover"][nid] = float(H[li])
            if bf[li] < 0:
                denom = H[li] + lam
                cols["value"][nid] = float(-G[li] / denom * lr) if denom > 0 else 0.0
                cols["feature"][nid] = -1
                cols["left"][nid] = cols["right"][nid] = -1
                continue
            cols["feature"][nid] = int(bf[li])
            cols["threshold"][nid] = float(bt[li])
            cols["default_left"][nid] = int(bl[li])
            cols["gain"][nid] = float(bs[li])
            for side, key in enumerate(("left", "right")):
                cid = len(cols["value"])
                for k in cols:
                    cols[k].append(0)
                cols[key][nid] = cid
                child_local[li, side] = len(next_frontier)
                next_frontier.append(cid)
        if not next_frontier:
            break
        # route active rows of split nodes to their children
        act_rows = np.flatnonzero(active)
        li = node_of_row[act_rows]
        split = bf[li] >= 0
        r, li = act_rows[split], li[split]
        v = b.X[r, bf[li]]
        go_left = np.where(np.isnan(v), bl[li], v < bt[li])
        new = np.full(n, -1, dtype=np.int64)
        new[r] = np.where(go_left, child_local[li, 0], child_local[li, 1])
        node_of_row = new
        frontier = next_frontier
        depth += 1
    return Tree(**cols)


def fit(X, y=None, params: HyperParams | None = None, seed: int = 0,
        feature_names: Sequence[str] | None = None) -> BoostedModel:
    """Train a model for ``params.rounds`` rounds.

    ``X`` may be a feature matrix object (with ``X``/``y``/``names``) when ``y`` is omitted.
    """
    params = params or HyperParams()
    if y is None and feature_names is None and hasattr(X, "names"):
        feature_names = X.names
    return Booster(X, y, params, seed, feature_names).grow(params.rounds).model()


def log_loss(y: np.ndarray, margin: np.ndarray) -> float:
    # log(1 + e^m) - y*m, stable
    return float(np.mean(np.logaddexp(0.0, margin) - y * margin))


# --------------------------------------------------------------------------- attribution

def shap_values(model: BoostedModel, X) -> tuple[np.ndarray, float]:
    """Per-row, per-feature path-dependent Shapley values and the base value.

    For every row ``phi.sum() + base == predict_margin(row)`` up to rounding.
    """
    X = model._check(X)
    phi = np.zeros((X.shape[0], model.feature_count))
    base = model.base_margin
    for t in model.trees:
        base += t.expected_value()
        if t.n_internal == 0:
            continue
        kernels.tree_shap(X, t.feature, t.threshold, t.default_left, t.left, t.right,
                          t.value, t.cover, t.depth, phi)
    return phi, base


def feature_importance(model: BoostedModel, X) -> np.ndarray:
    """Mean absolute Shapley value per feature over the rows of ``X``."""
    if hasattr(X, "X"):
        if list(X.names) != list(model.feature_names) and model.feature_names:
            raise GBDTError("feature layout of matrix does not match the model")
        X = X.X
    phi, _ = shap_values(model, X)
    return np.abs(phi).mean(axis=0)
