import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from stmart.spatial import (
    TAU_MAX,
    AdjacencyGraph,
    GraphError,
    ZeroVarianceError,
    build_graph,
    car_smooth,
    grid_graph,
    icm_objective,
    marginal_objective,
    morans_i,
    morans_i_dense,
    solve_phi,
)

from oracles import dense_adjacency, dense_moran, dense_moran_variance_randomization, random_connected_edges


def index_graph(edges, C):
    return build_graph([(f"t{a}", f"t{b}") for a, b in edges], tract_ids=[f"t{k}" for k in range(C)])


class TestGraph:
    def test_grid_degrees(self):
        g = grid_graph(3, 4)
        assert g.C == 12 and g.edges.shape == (17, 2)
        assert sorted(g.degrees) == [2] * 4 + [3] * 6 + [4] * 2
        assert g.tract_ids[5] == "r1c1"

    def test_laplacian(self):
        g = grid_graph(2, 2)
        L = g.laplacian().toarray()
        assert np.array_equal(L, np.diag(g.degrees) - dense_adjacency(g))
        assert np.allclose(L.sum(axis=1), 0)

    def test_edge_list_is_undirected(self):
        g = build_graph([("a", "b"), ("b", "a"), ("b", "c")])
        assert g.edges.tolist() == [[0, 1], [1, 2]]

    def test_self_loop(self):
        with pytest.raises(GraphError, match="self-loop"):
            build_graph([("a", "a"), ("a", "b")])

    def test_unknown_id(self):
        with pytest.raises(GraphError, match="unknown"):
            build_graph([("a", "z")], tract_ids=["a", "b"])

    def test_isolated(self):
        with pytest.raises(GraphError, match="isolated"):
            build_graph([("a", "b")], tract_ids=["a", "b", "c"])
        g = build_graph([("a", "b")], tract_ids=["a", "b", "c"], allow_isolated=True)
        assert g.degrees.tolist() == [1, 1, 0]

    def test_asymmetric_mapping_warns_and_symmetrises(self):
        with pytest.warns(UserWarning, match="symmetrising"):
            g = build_graph({"a": ["b"], "b": [], "c": ["b"]})
        assert g.edges.tolist() == [[0, 1], [1, 2]]

    def test_symmetric_mapping_is_quiet(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            build_graph({"a": ["b"], "b": ["a"]})

    def test_components(self):
        g = build_graph([("a", "b"), ("c", "d")])
        assert sorted(map(sorted, g.components())) == [["a", "b"], ["c", "d"]]
        with pytest.raises(GraphError, match="components"):
            g.require_connected()

    def test_subgraph(self):
        g = grid_graph(2, 3)
        sub = g.subgraph([0, 1, 4])
        assert sub.tract_ids == ("r0c0", "r0c1", "r1c1")
        assert sub.edges.tolist() == [[0, 1], [1, 2]]


class TestMoran:
    def test_checkerboard(self):
        g = grid_graph(4, 4)
        x = np.array([(i + j) % 2 for i in range(4) for j in range(4)], dtype=float)
        assert morans_i(x, g).I == -1.0

    def test_path_hand_value(self):
        g = build_graph([("a", "b"), ("b", "c"), ("c", "d")])
        assert morans_i([1.0, 2.0, 3.0, 4.0], g).I == pytest.approx(1 / 3, abs=1e-15)

    def test_expected_value(self):
        r = morans_i(np.arange(9.0), grid_graph(3, 3))
        assert r.expected == -1 / 8

    def test_dense_oracle(self, rng):
        for C in range(3, 7):
            for _ in range(5):
                g = index_graph(random_connected_edges(rng, C), C)
                W = dense_adjacency(g)
                for _ in range(100):
                    x = rng.normal(size=C)
                    r = morans_i(x, g)
                    assert abs(r.I - dense_moran(x, W)) < 1e-12
                    assert abs(r.I - morans_i_dense(x, W)) < 1e-12

    def test_variance_matches_dense_formula(self, rng):
        for C in range(4, 10):
            g = index_graph(random_connected_edges(rng, C), C)
            W = dense_adjacency(g)
            x = rng.exponential(size=C)
            r = morans_i(x, g)
            var = dense_moran_variance_randomization(x, W)
            assert r.variance == pytest.approx(max(var, 0.0), rel=1e-10, abs=1e-14)
            if var > 0:
                z = (r.I - r.expected) / np.sqrt(var)
                assert r.p_value == pytest.approx(2 * norm.sf(abs(z)), rel=1e-9)

    def test_three_tracts_use_normality_variance(self):
        g = build_graph([("a", "b"), ("b", "c")])
        r = morans_i([1.0, 5.0, 2.0], g)
        n, S0, S1, S2 = 3, 4.0, 8.0, float((2 * 1) ** 2 + (2 * 2) ** 2 + (2 * 1) ** 2)
        expect = (n * n * S1 - n * S2 + 3 * S0**2) / ((n * n - 1) * S0**2) - 0.25
        assert r.variance == pytest.approx(expect, abs=1e-15)

    def test_zero_variance(self):
        with pytest.raises(ZeroVarianceError, match="zero variance"):
            morans_i(np.ones(9), grid_graph(3, 3))

    def test_input_checks(self):
        g = grid_graph(3, 3)
        with pytest.raises(ValueError):
            morans_i(np.ones(4), g)
        with pytest.raises(ValueError):
            morans_i(np.r_[np.arange(8.0), np.nan], g)
        with pytest.raises(ValueError):
            morans_i(np.arange(9.0), g, method="geary")

    def test_permutation(self, rng):
        g = grid_graph(5, 5)
        smooth = np.array([i + j for i in range(5) for j in range(5)], dtype=float)
        r = morans_i(smooth, g, method="permutation", n_perm=199, rng_seed=1)
        assert r.p_value == pytest.approx(1 / 200)
        assert r.I == morans_i(smooth, g).I
        again = morans_i(smooth, g, method="permutation", n_perm=199, rng_seed=1)
        assert again == r
        noise = rng.normal(size=25)
        assert morans_i(noise, g, method="permutation", n_perm=99).p_value > 1 / 100

    def test_normal_approximation_detects_smooth_field(self):
        g = grid_graph(6, 6)
        x = np.array([i + j for i in range(6) for j in range(6)], dtype=float)
        r = morans_i(x, g)
        assert r.I > 0.5 and r.p_value < 1e-6 and r.z > 0

    @settings(max_examples=100, deadline=None)
    @given(
        values=st.lists(st.integers(-50, 50), min_size=16, max_size=16),
        shift=st.integers(-1000, 1000),
        power=st.integers(-6, 6),
    )
    def test_location_scale_invariance_exact(self, values, shift, power):
        x = np.array(values, dtype=float)
        if np.ptp(x) == 0:
            return
        g = grid_graph(4, 4)
        base = morans_i(x, g)
        moved = morans_i((x + shift) * 2.0**power, g)
        assert moved.I == base.I
        assert moved.p_value == base.p_value

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31), a=st.floats(0.01, 100), b=st.floats(-100, 100))
    def test_affine_invariance_floating(self, seed, a, b):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=9)
        g = grid_graph(3, 3)
        assert abs(morans_i(a * x + b, g).I - morans_i(x, g).I) < 1e-9


def dense_phi(r, g, sigma2, tau, center=True):
    A = np.eye(g.C) / sigma2 + tau * g.laplacian().toarray()
    phi = np.linalg.inv(A) @ (np.asarray(r) / sigma2)
    return phi - phi.mean() if center else phi


class TestCAR:
    def test_two_node_example(self):
        g = build_graph([("a", "b")])
        assert np.allclose(solve_phi([3.0, 0.0], g, 1.0, 1.0, center=False), [2.0, 1.0], rtol=0, atol=1e-15)
        assert np.allclose(solve_phi([3.0, 0.0], g, 1.0, 1.0), [0.5, -0.5], rtol=0, atol=1e-15)

    def test_dense_inversion(self, rng):
        for C in range(2, 9):
            for _ in range(10):
                g = index_graph(random_connected_edges(rng, C), C)
                r = rng.normal(size=C)
                s2, tau = rng.uniform(0.1, 3), rng.uniform(0.1, 5)
                for center in (True, False):
                    got = solve_phi(r, g, s2, tau, center=center)
                    assert np.max(np.abs(got - dense_phi(r, g, s2, tau, center))) < 1e-10

    @pytest.mark.parametrize("seed", range(20))
    def test_icm_objective_never_increases(self, seed):
        rng = np.random.default_rng(seed)
        C = int(rng.integers(4, 16))
        g = index_graph(random_connected_edges(rng, C, 0.3), C)
        R = rng.normal(size=(3, C)) + np.linspace(0, 2, C)
        f = car_smooth(R, g, method="icm", max_sweeps=60)
        assert f.objective.size >= 2
        assert np.all(np.diff(f.objective) <= 1e-9 * np.abs(f.objective[:-1]).clip(1))

    @pytest.mark.parametrize("seed", range(10))
    def test_marginal_objective_never_increases(self, seed):
        rng = np.random.default_rng(seed)
        C = int(rng.integers(4, 16))
        g = index_graph(random_connected_edges(rng, C, 0.3), C)
        R = rng.normal(size=(2, C)) + np.linspace(0, 2, C)
        f = car_smooth(R, g, method="marginal", max_sweeps=200)
        assert np.all(np.diff(f.objective) <= 1e-9 * np.abs(f.objective[:-1]).clip(1))

    def test_objective_functions_agree_with_dense_forms(self, rng):
        g = grid_graph(2, 3)
        R = rng.normal(size=(2, 6))
        Phi = rng.normal(size=(2, 6))
        Phi -= Phi.mean(axis=1, keepdims=True)
        tau = np.array([0.7, 2.0])
        L = g.laplacian().toarray()
        n = R.size
        expect = 0.5 * n * np.log(0.4) + np.sum((R - Phi) ** 2) / 0.8
        for t in range(2):
            expect += 0.5 * tau[t] * Phi[t] @ L @ Phi[t] - 0.5 * 5 * np.log(tau[t])
        assert icm_objective(R, Phi, 0.4, tau, g) == pytest.approx(expect, rel=1e-12)
        lam, V = np.linalg.eigh(L)
        marg = 0.0
        for t in range(2):
            cov = 0.4 * np.eye(6) + np.linalg.pinv(L) / tau[t]
            Pc = V[:, 1:].T @ cov @ V[:, 1:]
            c = V[:, 1:].T @ R[t]
            c0 = V[:, 0] @ R[t]
            marg += 0.5 * (np.linalg.slogdet(Pc)[1] + c @ np.linalg.solve(Pc, c))
            marg += 0.5 * (np.log(0.4) + c0**2 / 0.4)
        assert marginal_objective(R, 0.4, tau, g) == pytest.approx(marg, rel=1e-10)

    @pytest.mark.parametrize("method", ["icm", "marginal"])
    def test_field_zero_off_slots_and_centred(self, rng, method):
        g = grid_graph(4, 4)
        R = rng.normal(size=(4, 16))
        R[1] = np.nan
        f = car_smooth(R, g, slots=[1, 3, 4], method=method)
        assert f.slots == (1, 3, 4)
        assert np.all(f.phi[1] == 0) and np.isnan(f.tau[1])
        assert np.all(np.abs(f.phi.sum(axis=1)) < 1e-10)
        assert np.all(np.isfinite(f.tau[[0, 2, 3]]))

    def test_stationary_point_of_conditional_solve(self, rng):
        g = grid_graph(3, 4)
        R = rng.normal(size=(1, 12)) + np.arange(12) / 4
        f = car_smooth(R, g, method="marginal")
        again = solve_phi(R[0], g, f.sigma2, f.tau[0])
        assert np.allclose(f.phi[0], again, atol=1e-12)

    def test_zero_residuals_pin_every_slot(self):
        g = grid_graph(3, 3)
        f = car_smooth(np.zeros((2, 9)), g)
        assert f.pinned == (1, 2) and np.all(f.tau == TAU_MAX) and np.all(f.phi == 0)

    def test_constant_slot_is_pinned(self, rng):
        g = grid_graph(3, 3)
        R = np.vstack([np.full(9, 2.0), rng.normal(size=9)])
        f = car_smooth(R, g, method="icm")
        assert 1 in f.pinned
        assert np.allclose(f.phi[0], 0, atol=1e-12)

    def test_spatial_signal_is_recovered(self, rng):
        from stmart.synth import sample_icar

        g = grid_graph(10, 10)
        phi = sample_icar(g, 1.0, rng)
        R = (phi + rng.normal(0, 0.3, 100)).reshape(1, -1)
        f = car_smooth(R, g, method="marginal")
        assert np.corrcoef(f.phi[0], phi)[0, 1] > 0.8

    def test_warm_start_accepts_previous_field(self, rng):
        g = grid_graph(3, 3)
        R = rng.normal(size=(2, 9))
        first = car_smooth(R, g, method="icm")
        second = car_smooth(R, g, method="icm", init=first)
        assert second.sweeps <= first.sweeps

    def test_errors(self, rng):
        g = grid_graph(3, 3)
        with pytest.raises(ValueError):
            car_smooth(np.zeros((2, 5)), g)
        with pytest.raises(ValueError):
            car_smooth(np.zeros((2, 9)), g, slots=[3])
        with pytest.raises(ValueError):
            car_smooth(rng.normal(size=(1, 9)), g, method="mcmc")
        with pytest.raises(GraphError):
            car_smooth(np.ones((1, 4)), build_graph([("a", "b"), ("c", "d")]))

    def test_graph_type(self):
        assert isinstance(grid_graph(2, 2), AdjacencyGraph)
