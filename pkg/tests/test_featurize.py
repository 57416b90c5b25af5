import numpy as np
import pytest

from conftest import point_chain
from src.errors import DegenerateGeometry
from src.featurize import (
    EDGE_ATOM_ORDER, N_ATOM_PAIRS, NODE_DIM, RbfBank, build_graph, dihedral,
    edge_features, featurize_many, knn_graph, node_features, rbf_encode,
    read_graphs, write_graphs
)
from src.protein_io import ensure_cbeta


@pytest.mark.parametrize('p3, expected', [
    ((0.0, 1.0, 1.0), -np.pi / 2),
    ((-1.0, 1.0, 0.0), np.pi),
    ((1.0, 1.0, 0.0), 0.0),
])
def test_dihedral_known_values(p3, expected):
    p0, p1, p2 = np.array([1.0, 0, 0]), np.zeros(3), np.array([0, 1.0, 0])
    assert dihedral(p0, p1, p2, np.array(p3)) == pytest.approx(expected)


def test_dihedral_rejects_collinear_atoms():
    with pytest.raises(DegenerateGeometry):
        dihedral(np.zeros(3), np.array([1.0, 0, 0]), np.array([2.0, 0, 0]), np.array([3.0, 1, 0]))


def test_node_features_layout(chain):
    feats = node_features(chain)
    assert feats.shape == (len(chain), NODE_DIM)
    # First residue: beta, phi, omega undefined; last residue: gamma, psi undefined
    np.testing.assert_array_equal(feats[0, [2, 3, 6, 7, 10, 11]], 0.0)
    np.testing.assert_array_equal(feats[-1, [4, 5, 8, 9]], 0.0)
    middle = feats[1:-1]
    np.testing.assert_allclose(middle[:, 0::2] ** 2 + middle[:, 1::2] ** 2, 1.0)


def test_node_features_ignore_rigid_motion(chain):
    theta = 0.7
    rotation = np.array([[np.cos(theta), -np.sin(theta), 0],
                         [np.sin(theta), np.cos(theta), 0],
                         [0, 0, 1.0]])
    moved = chain.transformed(rotation, np.array([3.0, -2.0, 8.0]))
    np.testing.assert_allclose(node_features(moved), node_features(chain), atol=1e-9)


def test_knn_matches_brute_force(chain):
    edges = knn_graph(chain, 5)
    n = len(chain)
    assert edges.shape == (n * 5, 2)
    assert not np.any(edges[:, 0] == edges[:, 1])
    np.testing.assert_array_equal(edges[:, 0], np.repeat(np.arange(n), 5))
    ca = chain.ca_coords()
    dist = np.linalg.norm(ca[:, None] - ca[None], axis=-1)
    for i in range(n):
        chosen = edges[edges[:, 0] == i, 1]
        others = np.delete(np.arange(n), np.concatenate([[i], chosen]))
        assert dist[i, chosen].max() <= dist[i, others].min()


def test_knn_clamps_k_and_breaks_ties_by_index():
    line = point_chain([(float(x), 0.0, 0.0) for x in range(4)])
    edges = knn_graph(line, 1)
    np.testing.assert_array_equal(edges, [[0, 1], [1, 0], [2, 1], [3, 2]])
    assert len(knn_graph(line, 10)) == 4 * 3
    with pytest.raises(ValueError):
        knn_graph(point_chain([(0.0, 0.0, 0.0)]), 3)


def test_rbf_encode_peaks_at_centres():
    bank = RbfBank.linear(16, 0.0, 20.0)
    assert bank.sigma == pytest.approx(20.0 / 15)
    response = rbf_encode(bank.centers[3], bank)
    assert response[3] == pytest.approx(1.0)
    assert response.argmax() == 3
    assert rbf_encode(np.zeros((2, 5)), bank).shape == (2, 5, 16)


def test_rbf_bank_rejects_unsorted_centres():
    with pytest.raises(ValueError):
        RbfBank(centers=np.array([1.0, 0.5]), sigma=1.0)


def test_edge_features_hold_ca_ca_distance(chain, tiny_bank):
    full = ensure_cbeta(chain)
    edges = knn_graph(full, 3)
    feats = edge_features(full, edges, tiny_bank)
    assert feats.shape == (len(edges), N_ATOM_PAIRS * tiny_bank.n_rbf)
    ca = EDGE_ATOM_ORDER.index('ca')
    pair = ca * len(EDGE_ATOM_ORDER) + ca
    block = feats[:, pair * tiny_bank.n_rbf:(pair + 1) * tiny_bank.n_rbf]
    i, j = edges[0]
    distance = np.linalg.norm(full.residues[i].ca - full.residues[j].ca)
    np.testing.assert_allclose(block[0], rbf_encode(distance, tiny_bank))


def test_build_graph_and_file_round_trip(tmp_path, family_dataset, tiny_bank):
    graphs = [build_graph(c, 4, tiny_bank) for c in family_dataset.chains[:2]]
    assert graphs[0].n_residues == len(family_dataset.chains[0])
    assert graphs[0].n_edges == graphs[0].n_residues * 4
    path = str(tmp_path / 'graphs.bin')
    write_graphs(path, graphs)
    loaded = read_graphs(path)
    assert [g.id for g in loaded] == [g.id for g in graphs]
    for before, after in zip(graphs, loaded):
        np.testing.assert_array_equal(after.edges, before.edges)
        np.testing.assert_allclose(after.node_feats, before.node_feats, atol=1e-6)
        np.testing.assert_allclose(after.edge_feats, before.edge_feats, atol=1e-6)
        assert after.k == 4
        assert after.bank.n_rbf == tiny_bank.n_rbf
        np.testing.assert_allclose(after.bank.centers, tiny_bank.centers)


def test_featurize_many_skips_failures_and_keeps_order(family_dataset, tiny_bank):
    broken = point_chain([(0.0, 0.0, 0.0)] * 4, 'broken')
    chains = [family_dataset.chains[0], broken, family_dataset.chains[1]]
    graphs = featurize_many(chains, 4, tiny_bank, threads=2)
    assert [g.id for g in graphs] == [chains[0].id, chains[2].id]


def test_rbf_far_tail_stays_positive():
    bank = RbfBank.linear(16, 0.0, 20.0)
    response = rbf_encode(1e4, bank)
    assert np.all(response > 0.0)
    assert np.all(response < 1e-21)
    assert rbf_encode(bank.centers[5] + bank.sigma, bank)[5] == pytest.approx(np.exp(-0.5))


def test_edge_features_ignore_rigid_motion(chain, tiny_bank):
    q, _ = np.linalg.qr(np.random.default_rng(11).normal(size=(3, 3)))
    rotation = q * np.sign(np.linalg.det(q))
    moved = chain.transformed(rotation, np.array([-7.0, 25.0, 3.5]))
    before = build_graph(chain, 4, tiny_bank)
    after = build_graph(moved, 4, tiny_bank)
    np.testing.assert_array_equal(after.edges, before.edges)
    np.testing.assert_allclose(after.edge_feats, before.edge_feats, atol=1e-9)
    np.testing.assert_allclose(after.node_feats, before.node_feats, atol=1e-9)


def test_reversed_edge_has_different_features(chain, tiny_bank):
    full = ensure_cbeta(chain)
    feats = edge_features(full, np.array([[2, 7], [7, 2]]), tiny_bank)
    assert not np.allclose(feats[0], feats[1])


def test_cbeta_weights_change_cbeta_edge_features(chain, tiny_bank):
    default = build_graph(chain, 4, tiny_bank)
    custom = build_graph(chain, 4, tiny_bank, cbeta_weights=(-0.4, 0.7, -0.3))
    np.testing.assert_array_equal(custom.edges, default.edges)
    np.testing.assert_allclose(custom.node_feats, default.node_feats)
    n_atoms = len(EDGE_ATOM_ORDER)
    cb = EDGE_ATOM_ORDER.index('cb')
    ca = EDGE_ATOM_ORDER.index('ca')

    def block(graph, x, y):
        pair = x * n_atoms + y
        return graph.edge_feats[:, pair * tiny_bank.n_rbf:(pair + 1) * tiny_bank.n_rbf]

    assert not np.allclose(block(custom, cb, ca), block(default, cb, ca))
    np.testing.assert_allclose(block(custom, ca, ca), block(default, ca, ca))
