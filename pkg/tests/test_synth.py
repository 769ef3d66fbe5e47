import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stmart.mart import BoostConfig, fit_mart, predict_mart
from stmart.panel import validate_panel
from stmart.spatial import morans_i
from stmart.synth import SIGNALS, SynthSpec, generate, sample_icar
from stmart.spatial import grid_graph


def test_shapes_and_order():
    panel, g, truth = generate(SynthSpec(grid=(3, 4), T=5, rng_seed=1))
    assert (panel.n, panel.T, panel.C, panel.p) == (60, 5, 12, 6)
    assert list(panel.slot[:12]) == [1] * 12 and list(panel.tract[:12]) == list(range(12))
    assert panel.covariate_names == ("x1", "x2", "x3", "x4", "x5", "x6")
    assert truth.phi.shape == (5, 12)
    assert panel.is_balanced()


def test_deterministic():
    spec = SynthSpec(grid=(4, 4), T=3, spatial_slots=(2,), missing_rate=0.1, rng_seed=9)
    a, b = generate(spec), generate(spec)
    assert a[0] == b[0]
    assert np.array_equal(a[2].phi, b[2].phi) and np.array_equal(a[2].f, b[2].f)
    assert np.array_equal(a[1].edges, b[1].edges)


def test_planted_slots_sum_to_zero_and_others_vanish():
    panel, g, truth = generate(SynthSpec(T=6, spatial_slots=(2, 5), rng_seed=4))
    assert np.all(np.abs(truth.phi[[1, 4]].sum(axis=1)) < 1e-10)
    assert np.all(truth.phi[[0, 2, 3, 5]] == 0.0)
    assert np.all(np.abs(truth.phi[[1, 4]]).max(axis=1) > 0)


def test_response_decomposition():
    panel, g, truth = generate(SynthSpec(grid=(4, 4), T=2, spatial_slots=(1,), sigma2_true=0.0, rng_seed=2))
    phi_rows = truth.phi[panel.slot - 1, panel.tract]
    assert np.array_equal(panel.y, truth.f + phi_rows)


def test_signal_definitions():
    X = np.array([[0.5, 0.5, 0.7, 0.1, 0.2, 0.3]])
    assert SIGNALS["additive-nonlinear"][0](X)[0] == pytest.approx(2 + 0.25 + 1)
    assert SIGNALS["linear"][0](X)[0] == pytest.approx(0.5 + 1.0 - 0.7)
    assert SIGNALS["friedman"][0](X)[0] == pytest.approx(10 * np.sin(np.pi * 0.25) + 20 * 0.04 + 1 + 1)


def test_noiseless_linear_is_learnable():
    panel, g, truth = generate(SynthSpec(T=10, signal="linear", sigma2_true=0.0, rng_seed=0))
    assert np.array_equal(panel.y, truth.f)
    e = fit_mart(panel.X, panel.y, BoostConfig(nu=0.1, max_depth=3, m_max=500, bag_fraction=1.0, min_leaf=5))
    resid = panel.y - predict_mart(e, panel.X)
    assert 1 - resid.var() / panel.y.var() > 0.99


def test_missing_rate_about_seven_percent():
    panel, _, truth = generate(SynthSpec(T=10, missing_rate=0.07, rng_seed=11))
    frac = np.isnan(panel.X).mean()
    assert abs(frac - 0.07) <= 0.01
    assert not np.isnan(truth.X_complete).any()


def test_passes_validation():
    panel, _, _ = generate(SynthSpec(grid=(4, 5), T=3, missing_rate=0.2, spatial_slots=(1,), rng_seed=3))
    assert validate_panel(panel) == panel


def test_planted_field_detectable_across_seeds():
    # calibration fixture: tau=1, sigma2=0.25 on a 10x10 lattice
    hits = 0
    for seed in range(20):
        panel, g, truth = generate(SynthSpec(T=1, spatial_slots=(1,), tau_true=1.0, sigma2_true=0.25, rng_seed=seed))
        hits += morans_i(panel.y - truth.f, g).p_value < 0.01
    assert hits >= 18


def test_icar_covariance_is_pseudo_inverse():
    g = grid_graph(3, 3)
    rng = np.random.default_rng(0)
    draws = sample_icar(g, 2.0, rng, size=40000)
    assert np.allclose(draws.sum(axis=1), 0, atol=1e-10)
    target = np.linalg.pinv(g.laplacian().toarray()) / 2.0
    assert np.allclose(np.cov(draws.T), target, atol=0.02)


def test_custom_edges():
    edges = (("a", "b"), ("b", "c"), ("c", "d"))
    panel, g, _ = generate(SynthSpec(edges=edges, T=2, rng_seed=0))
    assert g.tract_ids == ("a", "b", "c", "d") and panel.C == 4


@pytest.mark.parametrize("kw", [
    {"missing_rate": 1.0}, {"spatial_slots": (0,)}, {"spatial_slots": (4,), "T": 3}, {"tau_true": 0.0},
    {"signal": "cubic"}, {"p": 2}, {"T": 0},
])
def test_invalid_specs(kw):
    with pytest.raises(ValueError):
        SynthSpec(**kw)


def test_disconnected_graph_rejected():
    with pytest.raises(ValueError):
        generate(SynthSpec(edges=(("a", "b"), ("c", "d")), T=1))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), rows=st.integers(2, 5), cols=st.integers(2, 5), T=st.integers(1, 4))
def test_generated_panels_validate(seed, rows, cols, T):
    spec = SynthSpec(grid=(rows, cols), T=T, spatial_slots=(1,), missing_rate=0.1, rng_seed=seed)
    panel, g, truth = generate(spec)
    assert validate_panel(panel) == panel
    assert abs(truth.phi[0].sum()) < 1e-10
