"""Two-stage backfitting of boosted trees and a CAR spatial field.

Each outer iteration fits the tree ensemble to the response minus the current
spatial field, tests the residuals ``y - f(x)`` of every time slot for spatial
autocorrelation with Moran's I, and smooths the residuals of the slots that
test significant. The field is zero on all other slots. Iteration stops when
the relative change ``delta`` of the fitted means drops below the threshold,
when no slot tests significant, or at the iteration cap.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_categorical, check_target, check_X
from .mart import BoostConfig, fit_mart, predict_mart, select_m
from .panel import Panel, QUANTITATIVE, CATEGORICAL
from .spatial import AdjacencyGraph, MoranResult, SpatialField, ZeroVarianceError, car_smooth, morans_i

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BackfitConfig:
    delta_threshold: float = 1e-7
    p_threshold: float = 0.01
    max_outer_iterations: int = 50
    boost: BoostConfig = field(default_factory=BoostConfig)
    moran_method: str = "normal"
    moran_perms: int = 999
    car_method: str = "marginal"
    m_selection: str = "fixed"
    patience: int = 100

    def __post_init__(self):
        if not self.delta_threshold > 0:
            raise ValueError("delta_threshold must be positive")
        if not 0.0 < self.p_threshold < 1.0:
            raise ValueError("p_threshold must lie in (0, 1)")
        if self.max_outer_iterations < 1:
            raise ValueError("max_outer_iterations must be >= 1")
        if self.moran_method not in ("normal", "permutation"):
            raise ValueError(f"unknown moran_method {self.moran_method!r}")
        if self.car_method not in ("icm", "marginal"):
            raise ValueError(f"unknown car_method {self.car_method!r}")
        if self.m_selection not in ("fixed", "oob"):
            raise ValueError(f"unknown m_selection {self.m_selection!r}")


@dataclass(frozen=True)
class MoranRow:
    slot: int
    label: object
    origin: MoranResult
    res1: MoranResult
    res2: MoranResult
    in_S: bool

    @property
    def overfit(self) -> bool:
        """Final residual I more than two standard deviations below its expectation."""
        r = self.res2
        return bool(np.isfinite(r.I) and r.variance > 0 and r.I < r.expected - 2.0 * r.sd)


@dataclass(frozen=True, eq=False)
class BackfitResult:
    ensemble: object
    field: SpatialField
    S_history: list
    delta_history: np.ndarray
    iterations: int
    converged: bool
    moran_table: list
    fitted: np.ndarray  # f(x_i)
    phi: np.ndarray  # phi at (T_i, C_i)
    tau_history: list = field(default_factory=list)

    @property
    def mu(self) -> np.ndarray:
        return self.fitted + self.phi

    @property
    def S(self) -> tuple:
        return self.S_history[-1] if self.S_history else ()


def delta(mu_prev, mu_curr) -> float:
    """``sum((mu_curr - mu_prev)**2) / sum(mu_curr**2)``."""
    mu_prev = np.asarray(mu_prev, dtype=float)
    mu_curr = np.asarray(mu_curr, dtype=float)
    if mu_prev.shape != mu_curr.shape:
        raise ValueError("mean vectors differ in length")
    denom = float(np.sum(mu_curr**2))
    if denom == 0.0:
        raise ZeroDivisionError("current means are all zero")
    return float(np.sum((mu_curr - mu_prev) ** 2)) / denom


def _nan_moran() -> MoranResult:
    nan = float("nan")
    return MoranResult(nan, nan, nan, nan, nan, "undefined")


def _make_learner(cfg: BackfitConfig):
    def learner(X, yz, boost: BoostConfig, categorical):
        ens = fit_mart(X, yz, boost, categorical)
        if cfg.m_selection == "oob":
            ens = ens.truncate(select_m(ens, "oob", cfg.patience))
        return ens, predict_mart(ens, X)

    return learner


def two_stage_fit(
    panel: Panel,
    g: AdjacencyGraph,
    cfg: BackfitConfig | None = None,
    *,
    learner: Callable | None = None,
    smoother: Callable | None = None,
    tester: Callable | None = None,
) -> BackfitResult:
    """Alternate tree boosting and CAR smoothing until the fitted means settle.

    Parameters
    ----------
    panel : Panel
        Must be balanced over the graph's tracts (every tract in every slot).
    g : AdjacencyGraph
    cfg : BackfitConfig
    learner, smoother, tester : callable, optional
        Replacements for the boosting stage ``learner(X, yz, boost_cfg,
        categorical) -> (model, fitted)``, the smoother ``smoother(E, g,
        slots, init) -> SpatialField`` and the spatial test ``tester(values,
        g) -> MoranResult``. Intended for testing.

    Notes
    -----
    The boosting seed for outer iteration ``q`` is ``boost.rng_seed + q - 1``.
    """
    cfg = cfg or BackfitConfig()
    learner = learner or _make_learner(cfg)
    if smoother is None:
        def smoother(E, g_, slots, init):
            return car_smooth(E, g_, slots=slots, init=init, method=cfg.car_method)
    if tester is None:
        def tester(values, g_):
            return morans_i(values, g_, method=cfg.moran_method, n_perm=cfg.moran_perms, rng_seed=cfg.boost.rng_seed)

    y = panel.y
    if not np.all(np.isfinite(y)):
        raise ValueError("response contains non-finite values")
    unknown = [t for t in panel.tract_ids if t not in g.index]
    if unknown:
        raise ValueError(f"panel tracts missing from the graph: {', '.join(map(str, unknown[:10]))}")
    tract = np.array([g.index[t] for t in panel.tract_ids], dtype=np.int64)[panel.tract]
    slot = panel.slot
    T, C = panel.T, g.C
    cover = np.zeros((T, C), dtype=int)
    np.add.at(cover, (slot - 1, tract), 1)
    if not np.all(cover == 1):
        raise ValueError("two_stage_fit needs every graph tract observed exactly once in every slot")
    if C < 3:
        raise ValueError("need at least 3 tracts")

    def per_slot(v):
        out = np.empty((T, C))
        out[slot - 1, tract] = v
        return out

    def test_all(M):
        rows = []
        for t in range(T):
            try:
                rows.append(tester(M[t], g))
            except ZeroVarianceError:
                rows.append(_nan_moran())
        return rows

    origin = test_all(per_slot(y))
    X, categorical = panel.X, panel.categorical
    phi = np.zeros((T, C))
    fld = SpatialField.zeros(T, C)
    q, dlt = 0, 1000.0
    mu1 = np.zeros(panel.n)
    S_hist, d_hist, tau_hist = [], [], []
    converged = False
    model, f, res1 = None, None, None
    while True:
        if dlt < cfg.delta_threshold:
            converged = True
            break
        if q >= cfg.max_outer_iterations:
            break
        q += 1
        yz = y - phi[slot - 1, tract]
        model, f = learner(X, yz, cfg.boost.with_seed(cfg.boost.rng_seed + q - 1), categorical)
        f = np.asarray(f, dtype=float)
        E = per_slot(y - f)
        res1 = test_all(E)
        S = tuple(t + 1 for t in range(T) if np.isfinite(res1[t].p_value) and res1[t].p_value < cfg.p_threshold)
        S_hist.append(S)
        if not S:
            phi = np.zeros((T, C))
            fld = SpatialField.zeros(T, C)
            converged = True
            log.info("iteration %d: no slot shows spatial correlation; stopping", q)
            break
        fld = smoother(E, g, S, fld)
        phi = np.array(fld.phi, dtype=float)
        off = np.ones(T, dtype=bool)
        off[np.array(S) - 1] = False
        phi[off] = 0.0
        tau_hist.append(np.array(fld.tau, dtype=float))
        mu0, mu1 = mu1, f + phi[slot - 1, tract]
        dlt = delta(mu0, mu1)
        d_hist.append(dlt)
        log.info("iteration %d: S=%s delta=%.3g", q, list(S), dlt)

    if not converged:
        log.warning("no convergence after %d outer iterations (last delta %.3g)", q, dlt)
    phi_rows = phi[slot - 1, tract]
    res2 = test_all(per_slot(y - f - phi_rows))
    final_S = set(S_hist[-1]) if S_hist else set()
    table = [
        MoranRow(t + 1, panel.time_labels[t], origin[t], res1[t], res2[t], (t + 1) in final_S)
        for t in range(T)
    ]
    return BackfitResult(
        ensemble=model,
        field=fld,
        S_history=S_hist,
        delta_history=np.array(d_hist),
        iterations=q,
        converged=converged,
        moran_table=table,
        fitted=f,
        phi=phi_rows,
        tau_history=tau_hist,
    )


class TwoStageRegressor(RegressorMixin, BaseEstimator):
    """Boosted trees plus a per-slot CAR spatial field, fitted by backfitting.

    ``fit`` takes the covariates plus per-row tract ids and time labels; the
    rows must cover every graph tract once per time label.

    Parameters
    ----------
    graph : AdjacencyGraph
    nu, max_depth, m_max, bag_fraction, min_leaf : boosting settings
    delta_threshold, p_threshold, max_outer_iterations : backfitting settings
    moran_method : {"normal", "permutation"}
    car_method : {"marginal", "icm"}
    categorical_features : bool mask or index list, optional
    random_state : int
    """

    def __init__(self, graph=None, nu=0.001, max_depth=3, m_max=5000, bag_fraction=0.5, min_leaf=10,
                 delta_threshold=1e-7, p_threshold=0.01, max_outer_iterations=50,
                 moran_method="normal", car_method="marginal", categorical_features=None,
                 random_state=0):
        self.graph = graph
        self.nu = nu
        self.max_depth = max_depth
        self.m_max = m_max
        self.bag_fraction = bag_fraction
        self.min_leaf = min_leaf
        self.delta_threshold = delta_threshold
        self.p_threshold = p_threshold
        self.max_outer_iterations = max_outer_iterations
        self.moran_method = moran_method
        self.car_method = car_method
        self.categorical_features = categorical_features
        self.random_state = random_state

    def _config(self) -> BackfitConfig:
        boost = BoostConfig(nu=self.nu, max_depth=self.max_depth, m_max=self.m_max,
                            bag_fraction=self.bag_fraction, min_leaf=self.min_leaf,
                            rng_seed=int(self.random_state or 0))
        return BackfitConfig(delta_threshold=self.delta_threshold, p_threshold=self.p_threshold,
                             max_outer_iterations=self.max_outer_iterations, boost=boost,
                             moran_method=self.moran_method, car_method=self.car_method)

    def _panel(self, X, y, tract, time):
        X = check_X(X)
        y = check_target(y, X.shape[0])
        cat = check_categorical(self.categorical_features, X.shape[1])
        labels = tuple(sorted(set(time)))
        slot_of = {t: s + 1 for s, t in enumerate(labels)}
        index = self.graph.index
        try:
            tract_idx = np.array([index[t] for t in tract], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"tract {exc.args[0]!r} not in graph") from None
        p = X.shape[1]
        return Panel(
            tract_ids=self.graph.tract_ids,
            time_labels=labels,
            tract=tract_idx,
            slot=np.array([slot_of[t] for t in time], dtype=np.int64),
            y=y,
            X=X,
            covariate_names=tuple(f"x{j}" for j in range(p)),
            covariate_kinds=tuple(CATEGORICAL if c else QUANTITATIVE for c in cat),
            levels=tuple(tuple(str(v) for v in np.unique(X[~np.isnan(X[:, j]), j])) if cat[j] else () for j in range(p)),
        )

    def fit(self, X, y, tract, time):
        if self.graph is None:
            raise ValueError("TwoStageRegressor needs an adjacency graph")
        panel = self._panel(X, y, tract, time)
        self.result_ = two_stage_fit(panel, self.graph, self._config())
        self.ensemble_ = self.result_.ensemble
        self.field_ = self.result_.field
        self.time_labels_ = panel.time_labels
        self.n_features_in_ = panel.p
        return self

    def predict(self, X, tract=None, time=None):
        """``f(x)``, plus the fitted spatial effect when ``tract`` and ``time`` are given."""
        check_is_fitted(self, "result_")
        f = predict_mart(self.ensemble_, np.asarray(X, dtype=float))
        if tract is None or time is None:
            return f
        slot_of = {t: s for s, t in enumerate(self.time_labels_)}
        phi = np.array([
            self.field_.phi[slot_of[s], self.graph.index[c]] if s in slot_of else 0.0
            for c, s in zip(tract, time)
        ])
        return f + phi
