import numpy as np
import pytest
from sklearn.base import clone

from stmart.backfit import BackfitConfig, MoranRow, TwoStageRegressor, delta, two_stage_fit
from stmart.mart import BoostConfig
from stmart.panel import QUANTITATIVE, Panel
from stmart.spatial import MoranResult, SpatialField, build_graph, car_smooth, grid_graph
from stmart.synth import SynthSpec, generate


class TestDelta:
    def test_identical(self):
        assert delta([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_from_zero(self):
        assert delta([0, 0], [1, 1]) == 1.0

    def test_hand_value(self):
        assert delta([1, 1], [2, 0]) == 0.5

    def test_errors(self):
        with pytest.raises(ValueError):
            delta([1.0], [1.0, 2.0])
        with pytest.raises(ZeroDivisionError):
            delta([1.0], [0.0])


def path_panel():
    g = build_graph([("a", "b"), ("b", "c")])
    y = np.array([2.0, 4.0, 6.0, -2.0, 0.0, 2.0])
    panel = Panel(
        tract_ids=("a", "b", "c"), time_labels=(1, 2), tract=np.array([0, 1, 2, 0, 1, 2]),
        slot=np.array([1, 1, 1, 2, 2, 2]), y=y, X=np.zeros((6, 1)), covariate_names=("x",),
        covariate_kinds=(QUANTITATIVE,), levels=((),),
    )
    return panel, g


def test_scripted_three_iteration_trace():
    # learner: f = yz / 2; tester: significant iff the slot's values sum > 0;
    # smoother: phi = E / 2 on the slots in S
    panel, g = path_panel()
    calls = []

    def learner(X, yz, boost, categorical):
        calls.append(("learn", yz.copy(), boost.rng_seed))
        return "model", yz / 2

    def tester(v, g_):
        return MoranResult(0.0, -0.5, 0.1, 0.0, 0.001 if v.sum() > 0 else 0.9, "mock")

    def smoother(E, g_, slots, init):
        calls.append(("smooth", E.copy(), slots))
        phi = np.zeros_like(E)
        for s in slots:
            phi[s - 1] = E[s - 1] / 2
        return SpatialField(phi, np.full(E.shape[0], np.nan), 1.0, slots)

    cfg = BackfitConfig(delta_threshold=1e-3, boost=BoostConfig(rng_seed=10))
    res = two_stage_fit(panel, g, cfg, learner=learner, tester=tester, smoother=smoother)

    yz = [calls[0][1], calls[2][1], calls[4][1]]
    assert np.array_equal(yz[0], [2, 4, 6, -2, 0, 2])
    assert np.array_equal(yz[1], [1.5, 3, 4.5, -2, 0, 2])
    assert np.array_equal(yz[2], [1.375, 2.75, 4.125, -2, 0, 2])
    assert [c[2] for c in calls[::2]] == [10, 11, 12]
    E = [calls[1][1], calls[3][1], calls[5][1]]
    assert np.array_equal(E[0], [[1, 2, 3], [-1, 0, 1]])
    assert np.array_equal(E[1], [[1.25, 2.5, 3.75], [-1, 0, 1]])
    assert np.array_equal(E[2], [[1.3125, 2.625, 3.9375], [-1, 0, 1]])
    assert res.S_history == [(1,), (1,), (1,)]
    assert [c[2] for c in calls[1::2]] == [(1,), (1,), (1,)]
    assert np.array_equal(res.delta_history, [1.0, 0.21875 / 28.46875, 0.013671875 / 27.279296875])
    assert res.iterations == 3 and res.converged
    assert np.array_equal(res.fitted, [0.6875, 1.375, 2.0625, -1, 0, 1])
    assert np.array_equal(res.phi, [0.65625, 1.3125, 1.96875, 0, 0, 0])
    assert np.array_equal(res.mu, [1.34375, 2.6875, 4.03125, -1, 0, 1])
    assert [row.in_S for row in res.moran_table] == [True, False]


def test_empty_S_stops_with_zero_field():
    panel, g = path_panel()

    def tester(v, g_):
        return MoranResult(0.0, -0.5, 0.1, 0.0, 0.5, "mock")

    res = two_stage_fit(panel, g, learner=lambda X, yz, b, c: (None, yz * 0), tester=tester)
    assert res.iterations == 1 and res.converged and res.S == ()
    assert np.all(res.phi == 0) and res.delta_history.size == 0


def test_iteration_cap_reports_non_convergence():
    panel, g = path_panel()
    flip = {"n": 0}

    def learner(X, yz, boost, categorical):
        flip["n"] += 1
        return None, yz * (0.2 if flip["n"] % 2 else 0.8)

    def tester(v, g_):
        return MoranResult(0.0, -0.5, 0.1, 0.0, 0.001, "mock")

    def smoother(E, g_, slots, init):
        return SpatialField(E / 2, np.ones(E.shape[0]), 1.0, slots)

    cfg = BackfitConfig(max_outer_iterations=4)
    res = two_stage_fit(panel, g, cfg, learner=learner, tester=tester, smoother=smoother)
    assert res.iterations == 4 and not res.converged
    assert res.delta_history.size == 4 and res.delta_history[-1] >= cfg.delta_threshold


def test_phi_zero_outside_S_every_iteration(rng):
    panel, g, _ = generate(SynthSpec(grid=(8, 8), T=4, spatial_slots=(1, 2), sigma2_true=0.05, rng_seed=3))
    seen = []

    def smoother(E, g_, slots, init):
        f = car_smooth(E, g_, slots=slots, init=init, method="marginal")
        seen.append((slots, f.phi.copy()))
        return f

    cfg = BackfitConfig(max_outer_iterations=4, boost=BoostConfig(nu=0.2, m_max=30, bag_fraction=1.0, min_leaf=5))
    res = two_stage_fit(panel, g, cfg, smoother=smoother)
    assert seen
    for slots, phi in seen:
        off = [t for t in range(4) if t + 1 not in slots]
        assert np.all(phi[off] == 0.0)
    final_off = [i for i in range(panel.n) if panel.slot[i] not in res.S]
    assert np.all(res.phi[final_off] == 0.0)


def test_planted_slot_is_detected():
    panel, g, _ = generate(SynthSpec(grid=(8, 8), T=3, spatial_slots=(2,), sigma2_true=0.1, rng_seed=5))
    cfg = BackfitConfig(max_outer_iterations=5, boost=BoostConfig(nu=0.2, m_max=40, bag_fraction=1.0, min_leaf=5))
    res = two_stage_fit(panel, g, cfg)
    assert res.S_history[0] == (2,)
    assert res.iterations <= 5


def test_unbalanced_panel_rejected():
    panel, g = path_panel()
    short = Panel(panel.tract_ids, panel.time_labels, panel.tract[:5], panel.slot[:5], panel.y[:5], panel.X[:5],
                  panel.covariate_names, panel.covariate_kinds, panel.levels)
    with pytest.raises(ValueError, match="exactly once"):
        two_stage_fit(short, g)


def test_zero_variance_slot_gets_nan_row():
    panel, g = path_panel()
    y = panel.y.copy()
    y[3:] = 7.0
    flat = Panel(panel.tract_ids, panel.time_labels, panel.tract, panel.slot, y, panel.X,
                 panel.covariate_names, panel.covariate_kinds, panel.levels)
    res = two_stage_fit(flat, g, BackfitConfig(boost=BoostConfig(m_max=2, min_leaf=1, bag_fraction=1.0)))
    assert np.isnan(res.moran_table[1].origin.I)


def test_overfit_flag():
    clean = MoranResult(0.0, -0.1, 0.01, 1.0, 0.3, "normal")
    over = MoranResult(-0.5, -0.1, 0.01, -4.0, 1e-4, "normal")
    assert not MoranRow(1, 1, clean, clean, clean, True).overfit
    assert MoranRow(1, 1, clean, clean, over, True).overfit


def test_config_validation():
    for kw in ({"delta_threshold": 0}, {"p_threshold": 1.5}, {"max_outer_iterations": 0},
               {"moran_method": "geary"}, {"car_method": "mcmc"}, {"m_selection": "cv"}):
        with pytest.raises(ValueError):
            BackfitConfig(**kw)


def test_regressor_api():
    panel, g, _ = generate(SynthSpec(grid=(5, 5), T=2, spatial_slots=(1,), sigma2_true=0.2, rng_seed=2))
    est = TwoStageRegressor(graph=g, nu=0.2, m_max=30, bag_fraction=1.0, min_leaf=5, max_outer_iterations=3)
    assert clone(est).get_params()["m_max"] == 30
    tract = [panel.tract_ids[k] for k in panel.tract]
    time = [panel.time_labels[s - 1] for s in panel.slot]
    est.fit(panel.X, panel.y, tract, time)
    f = est.predict(panel.X)
    mu = est.predict(panel.X, tract, time)
    assert np.allclose(f, est.result_.fitted)
    assert np.allclose(mu, est.result_.mu)
    with pytest.raises(ValueError):
        TwoStageRegressor().fit(panel.X, panel.y, tract, time)
