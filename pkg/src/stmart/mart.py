"""Gradient boosting with regression-tree base learners and shrinkage.

Each iteration fits a tree to the negative gradient of the loss at the current
fit, re-estimates every leaf by a line search on the loss, and adds the tree
scaled by the shrinkage ``nu``. Optional row subsampling (without replacement)
provides out-of-bag estimates used to choose the number of trees.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_categorical, check_fraction, check_positive_int, check_target, check_X
from .tree import TreeModel, apply_tree, fit_tree


class SquaredError:
    """``L(y, f) = (y - f)**2 / 2``."""

    name = "squared_error"

    def __call__(self, y, f):
        return 0.5 * np.mean((y - f) ** 2)

    def init_estimate(self, y):
        return float(np.mean(y))

    def negative_gradient(self, y, f):
        return y - f

    def leaf_values(self, y, f, leaf, n_nodes):
        """Per-node ``argmin_g sum L(y, f + g)`` over the rows in each leaf."""
        r = y - f
        counts = np.bincount(leaf, minlength=n_nodes)
        values = np.full(n_nodes, np.nan)
        for k in np.flatnonzero(counts):
            values[k] = np.mean(r[leaf == k])
        return values, counts


LOSSES = {"squared_error": SquaredError}


@dataclass(frozen=True)
class BoostConfig:
    nu: float = 0.001
    max_depth: int = 3
    m_max: int = 5000
    bag_fraction: float = 0.5
    loss: str = "squared_error"
    min_leaf: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.nu <= 1.0:
            raise ValueError(f"nu must lie in (0, 1], got {self.nu}")
        check_positive_int(self.max_depth, "max_depth")
        check_positive_int(self.m_max, "m_max")
        check_positive_int(self.min_leaf, "min_leaf")
        check_fraction(self.bag_fraction, "bag_fraction")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; available: {sorted(LOSSES)}")

    def with_seed(self, seed: int) -> "BoostConfig":
        return replace(self, rng_seed=int(seed))


@dataclass(frozen=True, eq=False)
class Ensemble:
    """``f0 + nu * sum(tree_m(x))`` over the fitted trees."""

    f0: float
    trees: tuple
    nu: float
    n_features: int
    categorical: np.ndarray
    oob_improvements: np.ndarray = field(default_factory=lambda: np.zeros(0))
    train_loss: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bag_fraction: float = 1.0
    config: BoostConfig | None = None

    @property
    def M(self) -> int:
        return len(self.trees)

    def truncate(self, m: int) -> "Ensemble":
        return replace(
            self,
            trees=self.trees[:m],
            oob_improvements=self.oob_improvements[:m],
            train_loss=self.train_loss[:m],
        )


def _with_values(tree: TreeModel, values: np.ndarray) -> TreeModel:
    values = np.asarray(values, dtype=float)
    values.setflags(write=False)
    return replace(tree, value=values)


def fit_mart(X, y, cfg: BoostConfig | None = None, categorical=None, staged=False):
    """Fit a boosted tree ensemble.

    Parameters
    ----------
    X : array of shape (n, p), NaN for missing
    y : array of shape (n,)
    cfg : BoostConfig
    categorical : bool mask or index list, optional
    staged : bool
        Also return the (M, n) array of training predictions after each
        iteration.

    Returns
    -------
    Ensemble, or (Ensemble, ndarray) when ``staged``.
    """
    cfg = cfg or BoostConfig()
    X = check_X(X)
    n, p = X.shape
    y = check_target(y, n)
    cat = check_categorical(categorical, p)
    if n < 2 * cfg.min_leaf:
        raise ValueError(f"need at least 2*min_leaf = {2 * cfg.min_leaf} rows, got {n}")
    loss = LOSSES[cfg.loss]()
    rng = np.random.default_rng(cfg.rng_seed)
    subsample = cfg.bag_fraction < 1.0
    n_bag = max(int(np.floor(cfg.bag_fraction * n)), 2 * cfg.min_leaf) if subsample else n
    if subsample and n_bag >= n:
        raise ValueError("bag_fraction leaves no out-of-bag rows")

    f0 = loss.init_estimate(y)
    F = np.full(n, f0)
    trees, oob, train = [], [], []
    stages = [] if staged else None
    for _ in range(cfg.m_max):
        if subsample:
            in_bag = np.zeros(n, dtype=bool)
            in_bag[rng.choice(n, size=n_bag, replace=False)] = True
            bag = np.flatnonzero(in_bag)
        else:
            bag = slice(None)
        pseudo = loss.negative_gradient(y, F)
        tree = fit_tree(X[bag], pseudo[bag], max_depth=cfg.max_depth, min_leaf=cfg.min_leaf, categorical=cat)
        leaf = apply_tree(tree, X)
        gamma, counts = loss.leaf_values(y[bag], F[bag], leaf[bag], tree.node_count)
        gamma = np.where(counts > 0, gamma, tree.value)
        tree = _with_values(tree, gamma)
        F_new = F + cfg.nu * tree.value[leaf]
        if subsample:
            oob.append(loss(y[~in_bag], F[~in_bag]) - loss(y[~in_bag], F_new[~in_bag]))
        F = F_new
        train.append(float(np.mean((y - F) ** 2)))
        trees.append(tree)
        if staged:
            stages.append(F.copy())

    ens = Ensemble(
        f0=f0,
        trees=tuple(trees),
        nu=cfg.nu,
        n_features=p,
        categorical=cat,
        oob_improvements=np.array(oob),
        train_loss=np.array(train),
        bag_fraction=cfg.bag_fraction,
        config=cfg,
    )
    if staged:
        return ens, np.array(stages)
    return ens


def predict_mart(e: Ensemble, X):
    """Ensemble prediction; a float when ``X`` is a single covariate vector."""
    arr = np.asarray(X, dtype=float)
    single = arr.ndim == 1
    if single:
        if arr.shape[0] != e.n_features:
            raise ValueError(f"expected {e.n_features} covariates, got {arr.shape[0]}")
        arr = arr.reshape(1, -1)
    arr = check_X(arr, e.n_features)
    F = np.full(arr.shape[0], e.f0)
    for tree in e.trees:
        F = F + e.nu * tree.value[apply_tree(tree, arr)]
    return float(F[0]) if single else F


def select_m(e: Ensemble, method="oob", patience=100, window=50) -> int:
    """Number of trees to keep.

    ``"fixed"`` keeps all of them. ``"oob"`` smooths the out-of-bag
    improvements with a trailing moving average of ``window`` iterations and
    returns the smallest ``m`` after which the smoothed improvement stays
    ``<= 0`` for ``patience`` consecutive iterations (all trees if that never
    happens).
    """
    if method == "fixed":
        return e.M
    if method != "oob":
        raise ValueError(f"unknown selection method {method!r}")
    if e.bag_fraction >= 1.0 or e.oob_improvements.size != e.M:
        raise ValueError("OOB selection needs an ensemble fitted with bag_fraction < 1")
    patience = check_positive_int(patience, "patience")
    window = check_positive_int(window, "window")
    imp = e.oob_improvements
    csum = np.concatenate([[0.0], np.cumsum(imp)])
    idx = np.arange(1, imp.size + 1)
    lo = np.maximum(idx - window, 0)
    smooth = (csum[idx] - csum[lo]) / (idx - lo)
    nonpos = smooth <= 0
    run = 0
    for k in range(imp.size):
        run = run + 1 if nonpos[k] else 0
        if run == patience:
            return k - patience + 1
    return e.M


class MARTRegressor(RegressorMixin, BaseEstimator):
    """Boosted regression trees with shrinkage and optional OOB tree selection.

    Parameters
    ----------
    nu : float, default=0.001
        Shrinkage applied to every tree.
    max_depth : int, default=3
    m_max : int, default=5000
        Number of boosting iterations.
    bag_fraction : float, default=0.5
        Fraction of rows sampled without replacement per iteration.
    min_leaf : int, default=10
    m_selection : {"fixed", "oob"}, default="fixed"
        ``"oob"`` truncates the ensemble at :func:`select_m`.
    patience, window : int
        Parameters of the OOB stopping rule.
    categorical_features : bool mask or index list, optional
    random_state : int, default=0
    """

    def __init__(self, nu=0.001, max_depth=3, m_max=5000, bag_fraction=0.5, min_leaf=10,
                 m_selection="fixed", patience=100, window=50, categorical_features=None,
                 random_state=0):
        self.nu = nu
        self.max_depth = max_depth
        self.m_max = m_max
        self.bag_fraction = bag_fraction
        self.min_leaf = min_leaf
        self.m_selection = m_selection
        self.patience = patience
        self.window = window
        self.categorical_features = categorical_features
        self.random_state = random_state

    def _config(self) -> BoostConfig:
        return BoostConfig(nu=self.nu, max_depth=self.max_depth, m_max=self.m_max,
                           bag_fraction=self.bag_fraction, min_leaf=self.min_leaf,
                           rng_seed=int(self.random_state or 0))

    def fit(self, X, y):
        from .interpret import importance

        ens = fit_mart(X, y, self._config(), self.categorical_features)
        m = select_m(ens, self.m_selection, self.patience, self.window)
        self.ensemble_ = ens.truncate(m) if m < ens.M else ens
        self.n_estimators_ = self.ensemble_.M
        self.n_features_in_ = ens.n_features
        self.oob_improvement_ = ens.oob_improvements
        self.train_score_ = ens.train_loss
        if self.ensemble_.M:
            self.feature_importances_ = importance(self.ensemble_)
        else:
            self.feature_importances_ = np.zeros(ens.n_features)
        return self

    def predict(self, X):
        check_is_fitted(self, "ensemble_")
        return predict_mart(self.ensemble_, check_X(X, self.n_features_in_))
