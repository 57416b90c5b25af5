from dataclasses import replace

import numpy as np
import pytest

from src.errors import (
    CorrespondenceTooShort, DegeneratePointSet, IndexOutOfRange, MalformedRecord,
    WindowOutOfRange
)
from src.protein_io import ProteinChain
from src.synth import backbone_template, chain_from_coords, random_rotation
from src.tmscore import (
    SimilarityMatrix, build_matrix, d0, kabsch, load_similarity, pair_scores,
    parse_similarity_tsv, save_matrix_cache, score_all_pairs, tm_fragment,
    tm_score_identity, write_similarity_tsv
)


def moved_copy(chain, seed=0):
    rng = np.random.default_rng(seed)
    return chain.transformed(random_rotation(rng), rng.uniform(-10, 10, size=3))


def test_kabsch_recovers_rigid_motion():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(12, 3)) * 5
    rotation = random_rotation(rng)
    y = x @ rotation.T + np.array([1.0, -2.0, 3.0])
    sup = kabsch(x, y)
    np.testing.assert_allclose(sup.rotation, rotation, atol=1e-9)
    np.testing.assert_allclose(sup.apply(x), y, atol=1e-9)
    assert sup.rmsd == pytest.approx(0.0, abs=1e-9)


def test_kabsch_never_returns_a_reflection():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(10, 3))
    mirrored = x * np.array([1.0, 1.0, -1.0])
    sup = kabsch(x, mirrored)
    assert np.linalg.det(sup.rotation) == pytest.approx(1.0)
    assert sup.rmsd > 0.1


def test_kabsch_degenerate_inputs():
    line = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]])
    with pytest.raises(DegeneratePointSet):
        kabsch(line, line + 1)
    with pytest.raises(DegeneratePointSet):
        kabsch(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DegeneratePointSet):
        kabsch(np.ones((4, 3)), np.ones((5, 3)))


def test_d0_scale():
    assert d0(10) == 0.5
    assert d0(15) == 0.5
    assert d0(100) == pytest.approx(1.24 * 85 ** (1 / 3) - 1.8)
    with pytest.raises(ValueError):
        d0(0)


def test_rigid_copy_scores_one(chain):
    result = tm_score_identity(moved_copy(chain), chain)
    assert result.score == pytest.approx(1.0, abs=1e-9)
    assert result.aligned_length == len(chain)


def test_noisy_family_members_score_below_one(family_dataset):
    a, b = family_dataset.chains[0], family_dataset.chains[1]
    tm_ab, tm_ba = pair_scores(a, b)
    assert 0.0 < tm_ab < 1.0
    # Same length: both normalizations agree
    assert tm_ab == pytest.approx(tm_ba, abs=1e-6)


def test_scores_normalize_by_reference_length(chain):
    short = chain.window(0, 12)
    result = tm_score_identity(short, chain, [(i, i) for i in range(12)])
    assert result.score == pytest.approx(12 / len(chain), abs=1e-9)


def test_fragment_scores(chain):
    assert tm_fragment(chain, 0, len(chain)).score == pytest.approx(1.0)
    assert tm_fragment(chain, 3, 10).score == pytest.approx(10 / len(chain), abs=1e-9)
    with pytest.raises(WindowOutOfRange):
        tm_fragment(chain, len(chain) - 2, 5)


def test_correspondence_errors(chain):
    with pytest.raises(CorrespondenceTooShort):
        tm_score_identity(chain, chain, [(0, 0), (1, 1)])
    with pytest.raises(IndexOutOfRange):
        tm_score_identity(chain, chain, [(0, 0), (1, 1), (2, 500)])


def test_similarity_matrix_views():
    matrix = SimilarityMatrix(['a', 'b', 'c'], np.array([[1.0, 0.2, 0.5],
                                                         [0.4, 1.0, 0.1],
                                                         [0.3, 0.6, 1.0]]))
    np.testing.assert_allclose(matrix.normalized('target')[0], [1.0, 0.4, 0.3])
    np.testing.assert_allclose(matrix.normalized('max')[0], [1.0, 0.4, 0.5])
    sub = matrix.subset(['c', 'a'])
    np.testing.assert_allclose(sub.scores, [[1.0, 0.3], [0.5, 1.0]])
    with pytest.raises(IndexOutOfRange):
        matrix.index('z')
    with pytest.raises(ValueError):
        matrix.normalized('min')


def test_build_matrix_fills_missing_pairs():
    matrix = build_matrix(['a', 'b', 'c'], [('a', 'b', 0.7, 0.6)])
    np.testing.assert_allclose(matrix.scores, [[1.0, 0.7, 0.0], [0.6, 1.0, 0.0], [0.0, 0.0, 1.0]])


def test_similarity_files_round_trip(tmp_path, family_dataset):
    matrix = family_dataset.matrix
    tsv = str(tmp_path / 'sim.tsv')
    cache = str(tmp_path / 'sim.bin')
    write_similarity_tsv(tsv, matrix)
    save_matrix_cache(cache, matrix)
    from_tsv = load_similarity(tsv)
    from_cache = load_similarity(cache)
    assert from_tsv.ids == matrix.ids
    np.testing.assert_allclose(from_tsv.scores, matrix.scores, atol=1e-6)
    np.testing.assert_array_equal(from_cache.scores, matrix.scores)
    with pytest.raises(MalformedRecord):
        parse_similarity_tsv('a\tb\t0.5\n')
    with pytest.raises(MalformedRecord):
        parse_similarity_tsv('a\tb\thigh\t0.5\n')


def test_score_all_pairs_threads_agree(family_dataset):
    chains = family_dataset.chains[:4]
    serial = score_all_pairs(chains)
    threaded = score_all_pairs(chains, threads=3)
    assert len(serial) == 6
    assert [r[:2] for r in serial] == [r[:2] for r in threaded]
    np.testing.assert_allclose([r[2:] for r in serial], [r[2:] for r in threaded])
    only = score_all_pairs(chains, pairs=[(0, 2)])
    assert only[0][:2] == (chains[0].id, chains[2].id)


def exhaustive_tm(x, y, l_target, max_iterations=100):
    """Best TM over every contiguous seed of at least three pairs, iterated to a fixed point."""
    scale = d0(l_target)
    n = len(x)
    best = 0.0
    for length in range(3, n + 1):
        for start in range(n - length + 1):
            subset = np.arange(start, start + length)
            for _ in range(max_iterations):
                sup = kabsch(x[subset], y[subset])
                dist = np.linalg.norm(sup.apply(x) - y, axis=1)
                best = max(best, np.sum(1.0 / (1.0 + (dist / scale) ** 2)) / l_target)
                cutoff = scale
                chosen = np.flatnonzero(dist < cutoff)
                while len(chosen) < 3:
                    cutoff += 1.0
                    chosen = np.flatnonzero(dist < cutoff)
                if np.array_equal(chosen, subset):
                    break
                subset = chosen
    return best


def test_half_displaced_chain_matches_exhaustive_seeds():
    chain = chain_from_coords(backbone_template(40, np.random.default_rng(12)), 'hinge')
    shift = np.array([20.0, 0.0, 0.0])
    residues = tuple(
        r if r.index < 20 else replace(r, n=r.n + shift, ca=r.ca + shift, c=r.c + shift,
                                       o=r.o + shift)
        for r in chain.residues
    )
    displaced = ProteinChain('hinge_moved', residues)
    result = tm_score_identity(chain, displaced)
    oracle = exhaustive_tm(chain.ca_coords(), displaced.ca_coords(), len(displaced))
    assert result.score == pytest.approx(oracle, abs=1e-6)
    assert 0.5 < result.score < 0.55
