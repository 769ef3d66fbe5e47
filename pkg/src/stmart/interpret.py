"""Relative importance, partial dependence and interaction screening.

Partial dependence is the data average of the ensemble with the chosen columns
overridden by a grid point. The fast path evaluates it tree by tree: grid
points that take the same branch at every split on an overridden column give
the same tree output for every row, so each tree is evaluated once per distinct
branch pattern instead of once per grid point. The result equals the brute-force
average up to summation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import check_target, check_X
from .mart import BoostConfig, Ensemble, fit_mart, predict_mart
from .tree import LEAF, _go_left, apply_tree, tree_importance


@dataclass(frozen=True)
class PDCurve:
    features: tuple
    grid: np.ndarray  # (k, len(features))
    values: np.ndarray  # (k,)


@dataclass(frozen=True)
class InteractionResult:
    feature: int
    statistic: float
    p_value: float
    null: np.ndarray


def raw_importance(e: Ensemble) -> np.ndarray:
    """Average over trees of each tree's summed split improvements."""
    if e.M == 0:
        raise ValueError("ensemble has no trees")
    return np.mean([tree_importance(t) for t in e.trees], axis=0)


def importance(e: Ensemble) -> np.ndarray:
    """Relative importance per covariate, scaled to sum to 100."""
    raw = raw_importance(e)
    total = raw.sum()
    if total <= 0:
        return np.zeros_like(raw)
    return 100.0 * raw / total


def default_grid(X, j, categorical=False, n_points=50) -> np.ndarray:
    """Quantile-spaced points of column ``j``; every observed level if categorical."""
    col = np.asarray(X, dtype=float)[:, j]
    col = col[~np.isnan(col)]
    if col.size == 0:
        raise ValueError(f"column {j} has no observed values")
    if categorical:
        return np.unique(col)
    return np.unique(np.quantile(col, np.linspace(0.0, 1.0, n_points)))


def _check_subset(e: Ensemble, features):
    features = tuple(int(f) for f in np.atleast_1d(features))
    if not features:
        raise ValueError("feature subset is empty")
    if len(set(features)) != len(features):
        raise ValueError("feature subset has duplicates")
    for f in features:
        if not 0 <= f < e.n_features:
            raise ValueError(f"feature index {f} out of range for {e.n_features} covariates")
    return features


def _pattern_groups(tree, features, grid):
    """Group grid rows by the branch taken at each split on ``features``."""
    nodes = [k for k in range(tree.node_count) if tree.feature[k] != LEAF and tree.feature[k] in features]
    if not nodes:
        return np.zeros(grid.shape[0], dtype=np.int64), np.array([0])
    pos = {f: i for i, f in enumerate(features)}
    bits = np.column_stack([_go_left(grid[:, pos[int(tree.feature[k])]], tree, k) for k in nodes])
    _, first, inverse = np.unique(bits, axis=0, return_index=True, return_inverse=True)
    return inverse.ravel(), first


def _tree_means(tree, X, features, grid):
    """Mean over rows of ``tree`` with ``features`` overridden, for each grid row."""
    groups, reps = _pattern_groups(tree, features, grid)
    Xo = X.copy()
    means = np.empty(reps.size)
    for g, r in enumerate(reps):
        Xo[:, features] = grid[r]
        means[g] = np.mean(_leaf_values(tree, Xo))
    return means[groups]


def _leaf_values(tree, X):
    return tree.value[apply_tree(tree, X)]


def partial_dependence(e: Ensemble, X, features, grid=None, n_points=50, method="fast") -> PDCurve:
    """Partial dependence of the ensemble on a subset of covariates.

    Parameters
    ----------
    e : Ensemble
    X : array of shape (n, p)
        Rows to average over (normally the training covariates).
    features : int or sequence of int
    grid : array, optional
        Evaluation points, shape (k,) for one feature or (k, len(features)).
        Defaults to :func:`default_grid` per feature (cartesian product for
        more than one).
    method : {"fast", "brute"}
    """
    features = _check_subset(e, features)
    X = check_X(X, e.n_features)
    if grid is None:
        axes = [default_grid(X, f, e.categorical[f], n_points) for f in features]
        mesh = np.meshgrid(*axes, indexing="ij")
        grid = np.column_stack([m.ravel() for m in mesh])
    grid = np.asarray(grid, dtype=float)
    if grid.ndim == 1:
        grid = grid.reshape(-1, 1) if len(features) == 1 else grid.reshape(1, -1)
    if grid.shape[0] == 0 or grid.shape[1] != len(features):
        raise ValueError("grid must be non-empty with one column per feature")
    feats = list(features)

    if len(features) == e.n_features:
        full = np.empty((grid.shape[0], e.n_features))
        full[:, feats] = grid
        values = predict_mart(e, full)
    elif method == "brute":
        values = np.empty(grid.shape[0])
        Xo = X.copy()
        for k, point in enumerate(grid):
            Xo[:, feats] = point
            values[k] = np.mean(predict_mart(e, Xo))
    elif method == "fast":
        values = np.full(grid.shape[0], e.f0)
        for tree in e.trees:
            values = values + e.nu * _tree_means(tree, X, feats, grid)
    else:
        raise ValueError(f"unknown method {method!r}")
    grid.setflags(write=False)
    values.setflags(write=False)
    return PDCurve(features, grid, values)


def _complement_dependence(e: Ensemble, X, j):
    """``(1/n) sum_k f(x_i with x_j := x_kj)`` for every row ``i``."""
    n = X.shape[0]
    col = X[:, [j]]
    out = np.full(n, e.f0)
    Xo = X.copy()
    for tree in e.trees:
        groups, reps = _pattern_groups(tree, [j], col)
        weights = np.bincount(groups, minlength=reps.size) / n
        acc = np.zeros(n)
        for g, r in enumerate(reps):
            Xo[:, j] = col[r, 0]
            acc += weights[g] * _leaf_values(tree, Xo)
        out = out + e.nu * acc
    return out


def _h_statistic(e: Ensemble, X, j):
    f = predict_mart(e, X)
    fj = partial_dependence(e, X, j, grid=X[:, [j]]).values
    fnj = _complement_dependence(e, X, j)
    f, fj, fnj = f - f.mean(), fj - fj.mean(), fnj - fnj.mean()
    denom = float(np.sum(f * f))
    if denom <= 0.0:
        return 0.0, f, fj, fnj
    return float(np.sum((f - fj - fnj) ** 2) / denom), f, fj, fnj


def interaction_strength(e: Ensemble, X, j, y=None, n_perm=20, rng_seed=0, cfg: BoostConfig | None = None):
    """Total interaction strength of covariate ``j`` with a permutation p-value.

    The statistic is the share of the centred model variance over the rows of
    ``X`` not captured by the best split into a function of ``x_j`` plus a
    function of the other covariates::

        H2 = sum_i (f(x_i) - F_j(x_ij) - F_notj(x_i,notj))**2 / sum_i f(x_i)**2

    with every term centred and ``F_j``, ``F_notj`` the partial dependence
    functions. This is an approximation of the usual total interaction test,
    not a transcription of it.

    The null distribution comes from ``n_perm`` refits (same boosting
    configuration, seeds ``rng_seed + 1, ...``) on the no-interaction surrogate
    ``mean(f) + F_j + F_notj`` plus a random permutation of the training
    residuals ``y - f``. Without ``y`` only the statistic is computed and
    the p-value is NaN. A statistic of zero (within 1e-12) has p-value 1.

    Returns
    -------
    InteractionResult
    """
    if n_perm < 20:
        raise ValueError("n_perm must be at least 20")
    X = check_X(X, e.n_features)
    (j,) = _check_subset(e, j)
    stat, f, fj, fnj = _h_statistic(e, X, j)
    if stat <= 1e-12:
        return InteractionResult(j, stat, 1.0, np.zeros(0))
    if y is None:
        return InteractionResult(j, stat, float("nan"), np.zeros(0))
    y = check_target(y, X.shape[0])
    cfg = cfg or e.config or BoostConfig(nu=e.nu, m_max=max(e.M, 1), bag_fraction=e.bag_fraction,
                                         max_depth=max(t.depth for t in e.trees))
    surrogate = predict_mart(e, X).mean() + fj + fnj
    resid = y - surrogate
    rng = np.random.default_rng(rng_seed)
    null = np.empty(n_perm)
    for b in range(n_perm):
        y_star = surrogate + rng.permutation(resid)
        e_star = fit_mart(X, y_star, cfg.with_seed(rng_seed + b + 1), e.categorical)
        null[b] = _h_statistic(e_star, X, j)[0]
    p = (1.0 + np.sum(null >= stat)) / (n_perm + 1.0)
    return InteractionResult(j, stat, float(p), null)
