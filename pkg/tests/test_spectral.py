import csv
import json

import numpy as np
import pytest
from conftest import dense_laplacian, random_sheaf, rel_err
from hypothesis import given, settings
from hypothesis import strategies as st

from stsheaf.graph import Graph, complete_graph, cycle_graph, path_graph, watts_strogatz
from stsheaf.sheaf import DenseCapError, Sheaf, kernel_basis, sheaf_energy
from stsheaf.spectral import (
    ConvergenceError,
    diffuse_flow,
    gcn_diffuse_step,
    gcn_propagation_matrix,
    oversmoothing_metric,
    power_lambda_max,
    spectrum,
)


def test_spectrum_p2_identity():
    rep = spectrum(Sheaf.identity(path_graph(2), 1), method="dense")
    assert rep.lambda_max == pytest.approx(2.0)
    assert rep.lambda_min_pos == pytest.approx(2.0)
    assert rep.kernel_dim == 1
    assert rep.stable_step_bound == pytest.approx(1.0)


def test_spectrum_k3():
    assert spectrum(Sheaf.identity(complete_graph(3), 1)).lambda_max == pytest.approx(3.0)


def test_power_matches_dense(rng):
    for _ in range(10):
        s = random_sheaf(rng)
        w = rng.uniform(0.1, 2.0, s.graph.num_edges)
        ref = np.linalg.eigvalsh(dense_laplacian(s, w))[-1]
        rep = spectrum(s, w, method="power")
        assert abs(rep.lambda_max - ref) <= 1e-6 * ref
        dense = spectrum(s, w, method="dense")
        assert rep.kernel_dim == dense.kernel_dim


def test_power_beyond_cap_leaves_kernel_unknown(rng):
    s = Sheaf.random(watts_strogatz(30, 4, 0.2, seed=0), 4, rng)
    rep = spectrum(s, method="power", cap=50)
    assert rep.kernel_dim is None and rep.lambda_min_pos is None
    with pytest.raises(DenseCapError):
        spectrum(s, method="dense", cap=50)


def test_power_nonconvergence_reports_iterate(rng):
    s = Sheaf.random(watts_strogatz(30, 4, 0.2, seed=0), 4, rng)
    with pytest.raises(ConvergenceError) as info:
        power_lambda_max(s, max_iter=2)
    assert info.value.iterate.shape == (30, 4)
    assert info.value.estimate > 0


def test_spectrum_zero_laplacian():
    g = path_graph(3)
    s = Sheaf(g, 2, np.zeros((2, 2)), np.zeros((2, 2)))
    rep = spectrum(s)
    assert rep.lambda_max == 0 and rep.kernel_dim == 6 and rep.stable_step_bound == float("inf")
    assert power_lambda_max(s) == 0.0


def test_spectrum_unknown_method():
    with pytest.raises(ValueError):
        spectrum(Sheaf.identity(path_graph(2), 1), method="lanczos")


def test_report_invariants(rng):
    s = random_sheaf(rng)
    rep = spectrum(s)
    assert rep.lambda_max >= rep.lambda_min_pos >= 0
    assert rep.stable_step_bound == pytest.approx(2 / rep.lambda_max)
    assert set(rep.to_json()) == {"lambda_max", "lambda_min_pos", "kernel_dim", "stable_step_bound", "method"}


def test_flow_zero_step(rng):
    s = random_sheaf(rng)
    h0 = rng.normal(size=(s.graph.num_nodes, s.stalk_dim))
    tr = diffuse_flow(s, None, h0, 0.0, 5)
    assert len(tr.states) == len(tr.energies) == len(tr.pair_distances) == 6
    assert all(np.array_equal(x, h0) for x in tr.states)
    assert len(set(tr.energies)) == 1


def test_flow_p2_one_step():
    tr = diffuse_flow(Sheaf.identity(path_graph(2), 1), None, [[1.0], [0.0]], 0.5, 1)
    assert tr.states[1].ravel().tolist() == [0.5, 0.5]
    assert tr.energies == [0.5, 0.0]


def test_flow_kernel_fixed_point(rng):
    s = Sheaf(path_graph(5), 2, rng.uniform(0.5, 2, (4, 2)), rng.uniform(0.5, 2, (4, 2)))
    h0 = (kernel_basis(s) @ rng.normal(size=kernel_basis(s).shape[1])).reshape(5, 2)
    rep = spectrum(s)
    tr = diffuse_flow(s, None, h0, 0.9 * rep.stable_step_bound, 20)
    for a, b in zip(tr.states, tr.states[1:]):
        assert np.max(np.abs(a - b)) <= 1e-10


def test_flow_converges_to_kernel_projection(rng):
    g = watts_strogatz(10, 4, 0.3, seed=1)
    s = Sheaf.identity(g, 2)
    h0 = rng.normal(size=(10, 2))
    rep = spectrum(s)
    tr = diffuse_flow(s, None, h0, 0.9 * rep.stable_step_bound, 1000)
    K = kernel_basis(s)
    proj = (K @ (K.T @ h0.ravel())).reshape(10, 2)
    assert np.max(np.abs(tr.states[-1] - proj)) <= 1e-6


def test_heterogeneous_equilibrium_on_tree(rng):
    s = Sheaf(path_graph(6), 1, rng.uniform(0.5, 2, (5, 1)), rng.uniform(0.5, 2, (5, 1)))
    rep = spectrum(s)
    assert rep.kernel_dim >= 1
    tr = diffuse_flow(s, None, rng.normal(size=(6, 1)), 0.9 * rep.stable_step_bound, 2000)
    assert tr.energies[-1] <= 1e-12 * max(tr.energies[0], 1)
    assert tr.pair_distances[-1] > 0.01


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.99))
def test_energy_monotone_for_stable_steps(seed, frac):
    rng = np.random.default_rng(seed)
    s = random_sheaf(rng)
    w = rng.uniform(0.1, 2.0, s.graph.num_edges)
    rep = spectrum(s, w)
    tr = diffuse_flow(s, w, rng.normal(size=(s.graph.num_nodes, s.stalk_dim)), frac * rep.stable_step_bound, 30)
    for a, b in zip(tr.energies, tr.energies[1:]):
        assert b <= a + 1e-12


def test_trace_export(tmp_path, rng):
    s = random_sheaf(rng)
    tr = diffuse_flow(s, None, rng.normal(size=(s.graph.num_nodes, s.stalk_dim)), 0.1, 3)
    tr.write_csv(tmp_path / "t.csv")
    rows = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert [r["step"] for r in rows] == ["0", "1", "2", "3"]
    assert [float(r["energy"]) for r in rows] == tr.energies
    tr.write_states_json(tmp_path / "s.json")
    states = json.loads((tmp_path / "s.json").read_text())
    assert np.array_equal(np.array(states[2]), tr.states[2])


def test_oversmoothing_metric_examples():
    assert oversmoothing_metric(path_graph(4), np.ones((4, 3))) == 0
    assert oversmoothing_metric(path_graph(2), [[0, 0], [3, 4]]) == 5.0
    assert oversmoothing_metric(path_graph(3), [[0], [1], [3]]) == 1.5
    with pytest.raises(ValueError):
        oversmoothing_metric(Graph(2, np.zeros((0, 2))), np.zeros((2, 1)))


def test_gcn_step_examples():
    assert np.allclose(gcn_diffuse_step(path_graph(2), [[1.0], [0.0]]).ravel(), [0.5, 0.5])
    c4 = cycle_graph(4)
    assert np.allclose(gcn_diffuse_step(c4, np.full((4, 2), 3.0)), 3.0)


def test_gcn_step_matches_matrix_oracle(rng):
    g = watts_strogatz(15, 4, 0.3, seed=4)
    h = rng.normal(size=(15, 3))
    a = g.adjacency() + np.eye(15)
    d = a.sum(axis=1)
    ref = a / np.sqrt(np.outer(d, d)) @ h
    assert np.allclose(gcn_diffuse_step(g, h), ref, atol=1e-12)
    assert np.allclose(gcn_propagation_matrix(g), a / np.sqrt(np.outer(d, d)))


def test_gcn_ten_steps_contract_like_matrix_power():
    import networkx as nx

    for seed in range(5):
        g = Graph.from_pairs(12, nx.gnp_random_graph(12, 0.6, seed=seed).edges())
        assert g.is_connected()
        h0 = np.random.default_rng(seed).normal(size=(12, 4))
        h, dists = h0, [oversmoothing_metric(g, h0)]
        for _ in range(10):
            h = gcn_diffuse_step(g, h)
            dists.append(oversmoothing_metric(g, h))
        assert dists[-1] < dists[0]
        ref = np.linalg.matrix_power(gcn_propagation_matrix(g), 10) @ h0
        assert np.allclose(h, ref, atol=1e-12)


def test_flow_energy_matches_eigencomponent_contraction(rng):
    # E_k = 1/2 sum_i lambda_i c_i^2 (1 - a lambda_i)^(2k) with c = V^T h0
    for frac in (0.9, 1.1):
        s = random_sheaf(rng)
        w = rng.uniform(0.1, 2.0, s.graph.num_edges)
        lam, V = np.linalg.eigh(dense_laplacian(s, w))
        a = frac * 2 / lam[-1]
        h0 = rng.normal(size=(s.graph.num_nodes, s.stalk_dim))
        c = V.T @ h0.ravel()
        tr = diffuse_flow(s, w, h0, a, 40)
        for k in (0, 10, 40):
            ref = 0.5 * np.sum(lam * c**2 * (1 - a * lam) ** (2 * k))
            assert tr.energies[k] == pytest.approx(ref, rel=1e-8, abs=1e-12)
