import os

import numpy as np
import pytest

from src.errors import ConfigError
from src.synth import (
    BOND_CA_C, BOND_C_N, BOND_N_CA, CROSS_FAMILY_TM, MIN_CA_SEPARATION, FamilySpec,
    backbone_template, generate, place_atom, random_rotation, write_dataset
)
from src.tmscore import parse_similarity_tsv


def test_place_atom_geometry():
    a = np.array([0.0, 1.0, 0.0])
    b = np.zeros(3)
    c = np.array([1.0, 0.0, 0.0])
    d = place_atom(a, b, c, 1.5, 110.0, 60.0)
    assert np.linalg.norm(d - c) == pytest.approx(1.5)
    cb, cd = b - c, d - c
    angle = np.degrees(np.arccos(cb @ cd / (np.linalg.norm(cb) * np.linalg.norm(cd))))
    assert angle == pytest.approx(110.0)


def test_backbone_bonds_and_self_avoidance():
    coords = backbone_template(60, np.random.default_rng(3))
    assert coords.shape == (60, 4, 3)
    n, ca, c = coords[:, 0], coords[:, 1], coords[:, 2]
    np.testing.assert_allclose(np.linalg.norm(ca - n, axis=1), BOND_N_CA, atol=1e-6)
    np.testing.assert_allclose(np.linalg.norm(c - ca, axis=1), BOND_CA_C, atol=1e-6)
    np.testing.assert_allclose(np.linalg.norm(n[1:] - c[:-1], axis=1), BOND_C_N, atol=1e-6)
    dist = np.linalg.norm(ca[:, None] - ca[None, :], axis=-1)
    far = np.abs(np.arange(60)[:, None] - np.arange(60)[None, :]) >= 2
    assert dist[far].min() >= MIN_CA_SEPARATION - 1e-9


def test_random_rotation_is_proper():
    rng = np.random.default_rng(0)
    for _ in range(20):
        q = random_rotation(rng)
        np.testing.assert_allclose(q @ q.T, np.eye(3), atol=1e-10)
        assert np.linalg.det(q) == pytest.approx(1.0)


def test_generate_layout(family_dataset):
    dataset = family_dataset
    assert len(dataset.chains) == 9
    assert dataset.families == [0, 0, 0, 1, 1, 1, 2, 2, 2]
    assert dataset.chains[0].id == 'fam000_m00'
    for f in range(3):
        lengths = {len(c) for c, fam in zip(dataset.chains, dataset.families) if fam == f}
        assert len(lengths) == 1
        assert 20 <= lengths.pop() <= 24


def test_generate_similarity(family_dataset):
    scores = family_dataset.matrix.scores
    families = np.array(family_dataset.families)
    same = families[:, None] == families[None, :]
    off_diag = ~np.eye(len(families), dtype=bool)
    np.testing.assert_allclose(np.diag(scores), 1.0)
    np.testing.assert_allclose(scores[~same], CROSS_FAMILY_TM)
    assert (scores[same & off_diag] > CROSS_FAMILY_TM).all()
    assert (scores[same & off_diag] <= 1.0 + 1e-6).all()


def test_generate_is_deterministic():
    spec = FamilySpec(2, 2, 15, 18, sigma=0.4, seed=11)
    a, b = generate(spec), generate(spec)
    for x, y in zip(a.chains, b.chains):
        np.testing.assert_array_equal(x.ca_coords(), y.ca_coords())
    np.testing.assert_array_equal(a.matrix.scores, b.matrix.scores)
    other = generate(FamilySpec(2, 2, 15, 18, sigma=0.4, seed=12))
    assert not np.array_equal(a.chains[0].ca_coords(), other.chains[0].ca_coords())


def test_zero_sigma_members_are_rigid_copies():
    dataset = generate(FamilySpec(1, 2, 20, 20, sigma=0.0, seed=5))
    assert dataset.matrix.scores[0, 1] == pytest.approx(1.0, abs=1e-5)


@pytest.mark.parametrize('kwargs', [
    {'sigma': -0.1},
    {'min_length': 5},
    {'min_length': 50, 'max_length': 40},
    {'n_families': 0},
    {'members': 0},
])
def test_family_spec_validation(kwargs):
    with pytest.raises(ConfigError):
        FamilySpec(**kwargs).validate()


def test_family_spec_from_text():
    spec = FamilySpec.from_text("n_families = 4\nmembers = 3  # per family\n\nsigma = 0.25\n")
    assert (spec.n_families, spec.members, spec.sigma) == (4, 3, 0.25)
    assert spec.max_length == FamilySpec().max_length
    with pytest.raises(ConfigError):
        FamilySpec.from_text("colour = red")
    with pytest.raises(ConfigError):
        FamilySpec.from_text("members = many")


def test_write_dataset(tmp_path, family_dataset):
    paths, matrix_path = write_dataset(family_dataset, str(tmp_path))
    assert len(paths) == 9
    assert os.path.basename(paths[0]) == 'fam000_m00.pdb'
    assert all(os.path.exists(p) for p in paths)
    with open(matrix_path) as f:
        matrix = parse_similarity_tsv(f.read())
    assert matrix.ids == family_dataset.matrix.ids
    np.testing.assert_allclose(matrix.scores, family_dataset.matrix.scores, atol=1e-4)
