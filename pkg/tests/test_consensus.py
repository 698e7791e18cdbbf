import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bflsim.consensus import (Topology, build_weights, consensus_step, gradient_divergence,
                              min_p2p_rounds, run_consensus, spectral_gap, validate_weights,
                              write_trace_csv)


def eig_oracle(L):
    M = L.shape[0]
    ev = np.linalg.eigvalsh(L - np.ones((M, M)) / M)
    return float(np.max(np.abs(ev)))


def test_complete_graph_weights():
    L = build_weights(Topology.complete(3), 0.2).L
    assert np.allclose(np.diag(L), 0.6) and np.allclose(L[~np.eye(3, dtype=bool)], 0.2)


def test_single_edge_weights():
    L = build_weights(Topology.complete(2), 0.4).L
    assert np.allclose(L, [[0.6, 0.4], [0.4, 0.6]])


def test_path_weights_follow_degree():
    L = build_weights(Topology.path(3), 0.2).L
    assert L[1, 1] == pytest.approx(0.6)
    assert L[0, 0] == pytest.approx(0.8) and L[2, 2] == pytest.approx(0.8)
    assert L[0, 2] == 0.0


def test_weight_errors():
    with pytest.raises(ValueError):
        build_weights(Topology.complete(3), 0.5)
    with pytest.raises(ValueError):
        build_weights(Topology(3, frozenset({(0, 1)})), 0.1)


def test_validate_weights():
    topo = Topology.complete(2)
    assert not validate_weights(np.eye(2), topo).spectral_ok
    assert validate_weights(build_weights(topo, 0.3).L, topo).ok
    L = build_weights(Topology.complete(3), 0.2).L.copy()
    L[0, 1] += 0.05
    assert not validate_weights(L, Topology.complete(3)).symmetric


def test_spectral_gap_examples():
    assert spectral_gap(build_weights(Topology.complete(3), 0.2).L) == pytest.approx(0.4, abs=1e-10)
    assert spectral_gap(np.full((2, 2), 0.5)) == pytest.approx(0.0, abs=1e-12)
    assert spectral_gap(np.eye(3)) == pytest.approx(1.0, abs=1e-10)


@pytest.mark.parametrize("name", ["ring", "star", "complete", "path"])
@pytest.mark.parametrize("M", [3, 5, 7])
def test_spectral_gap_matches_eigen_oracle(name, M):
    L = build_weights(Topology.named(name, M)).L
    assert spectral_gap(L) == pytest.approx(eig_oracle(L), abs=1e-10)


def test_consensus_step_examples():
    v = np.array([[1.0, -2.0]] * 3)
    L = build_weights(Topology.ring(3)).L
    assert np.allclose(consensus_step(v, L), v)
    assert np.allclose(consensus_step(np.array([[0.0], [2.0]]), np.full((2, 2), 0.5)), [[1], [1]])
    X = np.random.default_rng(0).standard_normal((5, 4))
    L5 = build_weights(Topology.star(5)).L
    assert np.allclose(consensus_step(X, L5).mean(0), X.mean(0), atol=1e-12)
    with pytest.raises(ValueError):
        consensus_step(X, L)


def test_run_consensus_examples():
    X = np.array([[0.0], [2.0]])
    r0 = run_consensus(X, np.full((2, 2), 0.5), 0)
    assert np.array_equal(r0.states, X) and np.allclose(r0.errors, [[-1], [1]])
    r1 = run_consensus(X, np.full((2, 2), 0.5), 1)
    assert np.allclose(r1.states, 1.0) and np.allclose(r1.errors, 0.0)


@given(st.integers(2, 6), st.integers(0, 20), st.integers(0, 2**31 - 1),
       st.sampled_from(["ring", "star", "complete"]))
@settings(max_examples=60, deadline=None)
def test_consensus_error_bound(M, phi, seed, name):
    L = build_weights(Topology.named(name, M)).L
    X = np.random.default_rng(seed).standard_normal((M, 3))
    lam = eig_oracle(L)
    r = run_consensus(X, L, phi)
    xi = gradient_divergence(X)
    assert np.max(np.sum(r.errors ** 2, 1)) <= M * lam ** (2 * phi) * xi ** 2 * (1 + 1e-9) + 1e-12


def test_gradient_divergence_examples():
    assert gradient_divergence(np.ones((3, 2))) == 0.0
    assert gradient_divergence([[0, 0], [3, 4]]) == pytest.approx(5.0)
    G = np.random.default_rng(0).standard_normal((4, 3))
    assert gradient_divergence(G + 7.5) == pytest.approx(gradient_divergence(G), rel=1e-12)


def test_min_p2p_rounds_examples():
    assert min_p2p_rounds(0.4, 0.64, 4, 1.0, 2) == 1
    assert min_p2p_rounds(0.4, 1e6, 4, 1.0, 2) == 0
    with pytest.raises(ValueError):
        min_p2p_rounds(1.0, 0.1, 4, 1.0, 2)
    for lam in np.linspace(0.05, 0.95, 10):
        for xi in (0.01, 0.1, 1.0):
            assert min_p2p_rounds(lam / 2, xi, 9, 2.0, 3) <= min_p2p_rounds(lam, xi, 9, 2.0, 3)


def test_topology_file_roundtrip(tmp_path):
    t = Topology.ring(5)
    (tmp_path / "t.txt").write_text(t.to_text())
    assert Topology.from_file(tmp_path / "t.txt") == t


def test_trace_csv(tmp_path):
    L = build_weights(Topology.complete(2), 0.25).L
    runs = [run_consensus([[0.0], [1.0]], L, 2)]
    write_trace_csv(runs, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "round,node,err_norm" and len(lines) == 1 + 3 * 2
