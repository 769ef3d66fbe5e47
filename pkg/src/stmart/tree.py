"""Least-squares regression trees with learned missing-value routing.

Split search is exhaustive: every midpoint between consecutive distinct values
of a quantitative feature, and every prefix of the levels of a categorical
feature once they are sorted by mean target. Rows whose split feature is
missing are tried on both sides and sent to whichever side lowers the weighted
SSE more; that choice is stored on the node and reused at prediction time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_categorical, check_positive_int, check_target, check_weights, check_X

LEAF = -1


@dataclass(frozen=True, eq=False)
class TreeModel:
    """A fitted tree stored as parallel node arrays (node 0 is the root).

    For a split node, ``feature >= 0``; quantitative splits send ``x <= threshold``
    left, categorical splits send levels in ``left_levels`` left. Categorical
    levels never seen at the node follow ``missing_left`` like missing values.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left_levels: tuple
    right_levels: tuple
    missing_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray
    improvement: np.ndarray
    n_features: int
    categorical: np.ndarray

    @property
    def node_count(self) -> int:
        return int(self.feature.shape[0])

    @property
    def depth(self) -> int:
        depths = np.zeros(self.node_count, dtype=int)
        for k in range(self.node_count):
            if self.feature[k] != LEAF:
                depths[self.left[k]] = depths[self.right[k]] = depths[k] + 1
        return int(depths.max())

    @property
    def feature_gains(self) -> np.ndarray:
        return tree_importance(self)

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.feature == LEAF)

    def to_dict(self, node: int = 0) -> dict:
        """Nested-record view of the subtree rooted at ``node``."""
        f = int(self.feature[node])
        if f == LEAF:
            return {"value": float(self.value[node]), "count": int(self.count[node])}
        rec = {
            "feature": f,
            "missing": "left" if self.missing_left[node] else "right",
            "improvement": float(self.improvement[node]),
            "count": int(self.count[node]),
            "value": float(self.value[node]),
        }
        if self.categorical[f]:
            rec["left_levels"] = list(self.left_levels[node])
            rec["right_levels"] = list(self.right_levels[node])
        else:
            rec["threshold"] = float(self.threshold[node])
        rec["left"] = self.to_dict(int(self.left[node]))
        rec["right"] = self.to_dict(int(self.right[node]))
        return rec

    @classmethod
    def from_dict(cls, record: dict, n_features: int, categorical=None) -> "TreeModel":
        b = _Builder()
        categorical = check_categorical(categorical, n_features)

        def visit(rec):
            k = b.new(float(rec["value"]), int(rec["count"]))
            if "feature" in rec:
                f = int(rec["feature"])
                if not 0 <= f < n_features:
                    raise ValueError(f"split feature {f} out of range")
                if categorical[f]:
                    split = (tuple(int(v) for v in rec["left_levels"]), tuple(int(v) for v in rec["right_levels"]))
                else:
                    split = float(rec["threshold"])
                lo = visit(rec["left"])
                hi = visit(rec["right"])
                b.make_split(k, f, split, rec["missing"] == "left", lo, hi, float(rec["improvement"]))
            return k

        visit(record)
        return b.build(n_features, categorical)


class _Builder:
    def __init__(self):
        self.feature, self.threshold, self.left_levels, self.right_levels = [], [], [], []
        self.missing_left, self.left, self.right = [], [], []
        self.value, self.count, self.improvement = [], [], []

    def new(self, value, count):
        self.feature.append(LEAF)
        self.threshold.append(np.nan)
        self.left_levels.append(())
        self.right_levels.append(())
        self.missing_left.append(False)
        self.left.append(LEAF)
        self.right.append(LEAF)
        self.value.append(value)
        self.count.append(count)
        self.improvement.append(0.0)
        return len(self.feature) - 1

    def make_split(self, k, feature, split, missing_left, lo, hi, improvement):
        self.feature[k] = feature
        if isinstance(split, tuple):
            self.left_levels[k], self.right_levels[k] = split
        else:
            self.threshold[k] = split
        self.missing_left[k] = missing_left
        self.left[k], self.right[k] = lo, hi
        self.improvement[k] = improvement

    def build(self, n_features, categorical):
        tree = TreeModel(
            feature=np.array(self.feature, dtype=np.int64),
            threshold=np.array(self.threshold, dtype=float),
            left_levels=tuple(self.left_levels),
            right_levels=tuple(self.right_levels),
            missing_left=np.array(self.missing_left, dtype=bool),
            left=np.array(self.left, dtype=np.int64),
            right=np.array(self.right, dtype=np.int64),
            value=np.array(self.value, dtype=float),
            count=np.array(self.count, dtype=np.int64),
            improvement=np.array(self.improvement, dtype=float),
            n_features=int(n_features),
            categorical=np.asarray(categorical, dtype=bool).copy(),
        )
        for arr in (tree.feature, tree.threshold, tree.missing_left, tree.left, tree.right,
                    tree.value, tree.count, tree.improvement, tree.categorical):
            arr.setflags(write=False)
        return tree


@dataclass
class _Split:
    gain: float
    feature: int
    split: object  # float threshold or (left_levels, right_levels)
    missing_left: bool


def _best_split_feature(x, yc, w, j, is_cat, min_leaf):
    miss = np.isnan(x)
    n_miss = int(miss.sum())
    W_miss = float(w[miss].sum()) if n_miss else 0.0
    S_miss = float((w[miss] * yc[miss]).sum()) if n_miss else 0.0
    obs = ~miss
    xo, yo, wo = x[obs], yc[obs], w[obs]
    if xo.size < 2:
        return None

    if is_cat:
        codes = xo.astype(np.int64)
        levels, inv = np.unique(codes, return_inverse=True)
        if levels.size < 2:
            return None
        Wg = np.bincount(inv, weights=wo)
        Sg = np.bincount(inv, weights=wo * yo)
        Ng = np.bincount(inv)
        order = np.lexsort((levels, Sg / Wg))
        Wg, Sg, Ng, keys = Wg[order], Sg[order], Ng[order], levels[order]
    else:
        order = np.argsort(xo, kind="stable")
        xs = xo[order]
        Wg, Sg, Ng = wo[order], (wo * yo)[order], np.ones(xs.size, dtype=np.int64)
        keys = xs

    cW, cS, cN = np.cumsum(Wg)[:-1], np.cumsum(Sg)[:-1], np.cumsum(Ng)[:-1]
    if not is_cat:
        distinct = keys[:-1] < keys[1:]
    else:
        distinct = np.ones(cW.size, dtype=bool)
    W_tot = float(Wg.sum()) + W_miss
    S_tot = float(Sg.sum()) + S_miss
    N_tot = int(Ng.sum()) + n_miss

    gains = np.full((cW.size, 2), -np.inf)
    for side, (dW, dS, dN) in enumerate(((W_miss, S_miss, n_miss), (0.0, 0.0, 0))):
        WL, SL, NL = cW + dW, cS + dS, cN + dN
        WR, SR, NR = W_tot - WL, S_tot - SL, N_tot - NL
        ok = distinct & (NL >= min_leaf) & (NR >= min_leaf)
        with np.errstate(divide="ignore", invalid="ignore"):
            g = SL * SL / WL + SR * SR / WR - S_tot * S_tot / W_tot
        gains[:, side] = np.where(ok, g, -np.inf)
        if n_miss == 0:
            break
    flat = int(np.argmax(gains))
    best = gains.flat[flat]
    if not np.isfinite(best):
        return None
    k, side = divmod(flat, 2)
    if is_cat:
        split = (tuple(sorted(int(v) for v in keys[: k + 1])), tuple(sorted(int(v) for v in keys[k + 1 :])))
    else:
        lo, hi = keys[k], keys[k + 1]
        thr = lo + (hi - lo) / 2.0
        if not lo <= thr < hi:
            thr = lo
        split = float(thr)
    if n_miss:
        missing_left = side == 0
    else:
        missing_left = cN[k] >= N_tot - cN[k]
    return _Split(float(best), j, split, bool(missing_left))


def _go_left(x, tree_or_split, node=None):
    """Routing mask for values ``x`` of the split feature."""
    if node is None:
        split, missing_left, is_cat = tree_or_split
    else:
        t = tree_or_split
        f = t.feature[node]
        is_cat = t.categorical[f]
        split = (t.left_levels[node], t.right_levels[node]) if is_cat else t.threshold[node]
        missing_left = bool(t.missing_left[node])
    if is_cat:
        left_lv, right_lv = split
        in_left = np.isin(x, left_lv)
        known = in_left | np.isin(x, right_lv)
        return np.where(known, in_left, missing_left)
    miss = np.isnan(x)
    with np.errstate(invalid="ignore"):
        goes = x <= split
    goes[miss] = missing_left
    return goes


def _sse(y, w):
    if y.size == 0:
        return 0.0
    m = np.sum(w * y) / np.sum(w)
    return float(np.sum(w * (y - m) ** 2))


def fit_tree(X, y, sample_weight=None, max_depth=3, min_leaf=10, categorical=None) -> TreeModel:
    """Grow a least-squares regression tree.

    Parameters
    ----------
    X : array of shape (n, p)
        Covariates; NaN marks a missing value. Categorical columns hold
        integer level codes.
    y : array of shape (n,)
    sample_weight : array of shape (n,), optional
    max_depth : int
        Maximum depth; a depth-1 tree is a single split.
    min_leaf : int
        Minimum number of training rows in every leaf.
    categorical : bool mask or index list, optional

    Returns
    -------
    TreeModel
    """
    X = check_X(X)
    n, p = X.shape
    y = check_target(y, n)
    w = check_weights(sample_weight, n)
    max_depth = check_positive_int(max_depth, "max_depth")
    min_leaf = check_positive_int(min_leaf, "min_leaf")
    cat = check_categorical(categorical, p)
    if n < 2 * min_leaf:
        raise ValueError(f"need at least 2*min_leaf = {2 * min_leaf} rows, got {n}")

    b = _Builder()
    root = b.new(float(np.sum(w * y) / np.sum(w)), n)
    stack = [(root, np.arange(n), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if depth >= max_depth or idx.size < 2 * min_leaf:
            continue
        yn, wn = y[idx], w[idx]
        if np.ptp(yn) == 0.0:
            continue
        yc = yn - np.sum(wn * yn) / np.sum(wn)
        best = None
        for j in range(p):
            s = _best_split_feature(X[idx, j], yc, wn, j, cat[j], min_leaf)
            if s is not None and (best is None or s.gain > best.gain):
                best = s
        if best is None or not best.gain > 1e-13 * float(np.sum(wn * yc * yc)):
            continue
        goes = _go_left(X[idx, best.feature], (best.split, best.missing_left, cat[best.feature]))
        li, ri = idx[goes], idx[~goes]
        improvement = _sse(yn, wn) - _sse(y[li], w[li]) - _sse(y[ri], w[ri])
        lo = b.new(float(np.sum(w[li] * y[li]) / np.sum(w[li])), li.size)
        hi = b.new(float(np.sum(w[ri] * y[ri]) / np.sum(w[ri])), ri.size)
        b.make_split(node, best.feature, best.split, best.missing_left, lo, hi, max(improvement, 0.0))
        stack.append((hi, ri, depth + 1))
        stack.append((lo, li, depth + 1))
    return b.build(p, cat)


def apply_tree(tree: TreeModel, X) -> np.ndarray:
    """Index of the leaf reached by each row of ``X``."""
    X = check_X(X, tree.n_features)
    out = np.empty(X.shape[0], dtype=np.int64)
    stack = [(0, np.arange(X.shape[0]))]
    while stack:
        node, rows = stack.pop()
        if rows.size == 0:
            continue
        f = tree.feature[node]
        if f == LEAF:
            out[rows] = node
            continue
        goes = _go_left(X[rows, f], tree, node)
        stack.append((int(tree.left[node]), rows[goes]))
        stack.append((int(tree.right[node]), rows[~goes]))
    return out


def predict_tree(tree: TreeModel, X):
    """Leaf value for each row of ``X`` (a float when ``X`` is one covariate vector)."""
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 1:
        if arr.shape[0] != tree.n_features:
            raise ValueError(f"expected {tree.n_features} covariates, got {arr.shape[0]}")
        return float(tree.value[apply_tree(tree, arr.reshape(1, -1))[0]])
    return tree.value[apply_tree(tree, arr)]


def tree_importance(tree: TreeModel) -> np.ndarray:
    """Summed squared-error improvement of the splits on each feature."""
    out = np.zeros(tree.n_features)
    splits = tree.feature != LEAF
    np.add.at(out, tree.feature[splits], tree.improvement[splits])
    return out


class RegressionTree(RegressorMixin, BaseEstimator):
    """Estimator wrapper around :func:`fit_tree`.

    Parameters
    ----------
    max_depth : int, default=3
    min_leaf : int, default=10
    categorical_features : bool mask or index list, optional
    """

    def __init__(self, max_depth=3, min_leaf=10, categorical_features=None):
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.categorical_features = categorical_features

    def fit(self, X, y, sample_weight=None):
        self.tree_ = fit_tree(X, y, sample_weight, self.max_depth, self.min_leaf, self.categorical_features)
        self.n_features_in_ = self.tree_.n_features
        self.feature_importances_ = tree_importance(self.tree_)
        return self

    def predict(self, X):
        check_is_fitted(self, "tree_")
        return predict_tree(self.tree_, check_X(X, self.n_features_in_))

    def apply(self, X):
        check_is_fitted(self, "tree_")
        return apply_tree(self.tree_, X)
