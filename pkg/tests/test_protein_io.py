import numpy as np
import pytest

from src.errors import BadMagic, ChainTooShort, NoChainFound, TruncatedFile
from src.protein_io import (
    deserialize_chain, ensure_cbeta, format_pdb, parse_pdb, read_chains,
    serialize_chain, virtual_cbeta, write_chains
)
from src.synth import backbone_template, chain_from_coords


def atom_line(serial, name, res_seq, xyz, chain='A', occupancy=1.0, altloc=' ', icode=' '):
    return (f"ATOM  {serial:5d} {name:<4s}{altloc}ALA {chain}{res_seq:4d}{icode}   "
            f"{xyz[0]:8.3f}{xyz[1]:8.3f}{xyz[2]:8.3f}{occupancy:6.2f}{0.0:6.2f}")


def residue_lines(res_seq, origin, chain='A', serial=1, with_cb=True):
    x, y, z = origin
    atoms = [('N', (x, y, z)), ('CA', (x + 1.46, y, z)), ('C', (x + 2.0, y + 1.4, z)),
             ('O', (x + 1.6, y + 2.5, z))]
    if with_cb:
        atoms.append(('CB', (x + 1.9, y - 0.8, z + 1.2)))
    return [atom_line(serial + i, name, res_seq, xyz, chain) for i, (name, xyz) in enumerate(atoms)]


def pdb_text(lines):
    return ('\n'.join(lines) + '\nEND\n').encode('utf-8')


def test_format_then_parse_reproduces_coordinates(chain):
    parsed = parse_pdb(format_pdb(chain).encode('utf-8'), structure_id=chain.id)
    assert parsed.id == chain.id
    assert len(parsed) == len(chain)
    np.testing.assert_allclose(parsed.atom_array(('n', 'ca', 'c', 'o')),
                               chain.atom_array(('n', 'ca', 'c', 'o')), atol=6e-4)
    assert all(r.cb is None for r in parsed.residues)


def test_selects_requested_chain():
    lines = []
    for i in range(3):
        lines += residue_lines(i + 1, (4.0 * i, 0, 0), chain='A', serial=10 * i + 1)
    for i in range(4):
        lines += residue_lines(i + 1, (4.0 * i, 9, 0), chain='B', serial=100 + 10 * i)
    assert len(parse_pdb(pdb_text(lines))) == 3
    chain_b = parse_pdb(pdb_text(lines), chain_id='B')
    assert len(chain_b) == 4
    assert chain_b.id == 'chain_B'
    np.testing.assert_allclose(chain_b.residues[0].n, [0.0, 9.0, 0.0])
    with pytest.raises(NoChainFound):
        parse_pdb(pdb_text(lines), chain_id='C')


def test_highest_occupancy_alternate_wins():
    lines = []
    for i in range(3):
        block = residue_lines(i + 1, (4.0 * i, 0, 0), serial=10 * i + 1)
        lines += [line for line in block if i != 1 or ' CA ' not in line]
    lines.append(atom_line(90, 'CA', 2, (50.0, 50.0, 50.0), occupancy=0.4, altloc='A'))
    lines.append(atom_line(91, 'CA', 2, (60.0, 60.0, 60.0), occupancy=0.6, altloc='B'))
    parsed = parse_pdb(pdb_text(lines))
    np.testing.assert_allclose(parsed.residues[1].ca, [60.0, 60.0, 60.0])


def test_incomplete_residues_are_dropped():
    lines = []
    for i in range(4):
        lines += residue_lines(i + 1, (4.0 * i, 0, 0), serial=10 * i + 1)
    lines += [line for line in residue_lines(5, (16.0, 0, 0), serial=60) if ' O  ' not in line]
    parsed = parse_pdb(pdb_text(lines))
    assert len(parsed) == 4
    assert [r.index for r in parsed.residues] == [0, 1, 2, 3]


def test_only_first_model_is_read():
    lines = ['MODEL        1']
    for i in range(3):
        lines += residue_lines(i + 1, (4.0 * i, 0, 0), serial=10 * i + 1)
    lines += ['ENDMDL', 'MODEL        2']
    for i in range(3, 6):
        lines += residue_lines(i + 1, (4.0 * i, 0, 0), serial=10 * i + 1)
    assert len(parse_pdb(pdb_text(lines))) == 3


def test_empty_and_short_inputs():
    with pytest.raises(NoChainFound):
        parse_pdb(b'HEADER    NOTHING\nEND\n')
    lines = residue_lines(1, (0, 0, 0)) + residue_lines(2, (4, 0, 0), serial=10)
    with pytest.raises(ChainTooShort):
        parse_pdb(pdb_text(lines))


def test_virtual_cbeta_sits_at_bond_distance():
    chain = chain_from_coords(backbone_template(20, np.random.default_rng(4)), 'ideal')
    filled = ensure_cbeta(chain)
    assert all(r.cb_is_virtual for r in filled.residues)
    for r in filled.residues:
        assert 1.3 < np.linalg.norm(r.cb - r.ca) < 1.8
    r = chain.residues[3]
    np.testing.assert_allclose(filled.residues[3].cb, virtual_cbeta(r.n, r.ca, r.c))


def test_real_cbeta_is_kept():
    lines = []
    for i in range(3):
        lines += residue_lines(i + 1, (4.0 * i, 0, 0), serial=10 * i + 1)
    parsed = ensure_cbeta(parse_pdb(pdb_text(lines)))
    assert not any(r.cb_is_virtual for r in parsed.residues)
    np.testing.assert_allclose(parsed.residues[0].cb, [1.9, -0.8, 1.2])


def test_chain_file_round_trip(tmp_path, family_dataset):
    chains = family_dataset.chains[:3]
    path = str(tmp_path / 'chains.bin')
    assert write_chains(path, chains) == 3
    assert read_chains(path) == [ensure_cbeta(c) for c in chains]


def test_chain_record_errors(chain):
    data = serialize_chain(chain)
    assert deserialize_chain(data) == ensure_cbeta(chain)
    with pytest.raises(BadMagic):
        deserialize_chain(b'XXXXXXXX' + data[8:])
    with pytest.raises(TruncatedFile):
        deserialize_chain(data[:-5])


def test_window_reindexes(chain):
    window = chain.window(5, 6, 'w')
    assert len(window) == 6
    assert [r.index for r in window.residues] == list(range(6))
    np.testing.assert_array_equal(window.residues[0].ca, chain.residues[5].ca)


def test_virtual_cbeta_direct_evaluation():
    n, ca, c = np.array([-1.45, 0.0, 0.0]), np.zeros(3), np.array([0.55, 1.42, 0.0])
    # b = (1.45, 0, 0), c = (0.55, 1.42, 0), b x c = (0, 0, 1.45 * 1.42)
    expected = np.array([
        0.56802827 * 1.45 - 0.54067466 * 0.55,
        -0.54067466 * 1.42,
        -0.58273431 * 1.45 * 1.42,
    ])
    np.testing.assert_allclose(virtual_cbeta(n, ca, c), expected, atol=1e-12)


def test_virtual_cbeta_collinear_frame():
    n, ca, c = np.array([-1.0, 0.0, 0.0]), np.zeros(3), np.array([1.5, 0.0, 0.0])
    expected = 0.56802827 * 1.0 - 0.54067466 * 1.5
    np.testing.assert_allclose(virtual_cbeta(n, ca, c), [expected, 0.0, 0.0], atol=1e-12)


def test_virtual_cbeta_moves_with_the_chain():
    chain = chain_from_coords(backbone_template(20, np.random.default_rng(6)), 'ideal')
    q, _ = np.linalg.qr(np.random.default_rng(7).normal(size=(3, 3)))
    rotation = q * np.sign(np.linalg.det(q))
    translation = np.array([12.0, -4.0, 30.0])
    moved_then_filled = ensure_cbeta(chain.transformed(rotation, translation))
    filled_then_moved = ensure_cbeta(chain).transformed(rotation, translation)
    for a, b in zip(moved_then_filled.residues, filled_then_moved.residues):
        np.testing.assert_allclose(a.cb, b.cb, atol=1e-9)
    twice = ensure_cbeta(ensure_cbeta(chain))
    assert twice == ensure_cbeta(chain)


def test_virtual_cbeta_uses_given_weights(chain):
    default = ensure_cbeta(chain)
    custom = ensure_cbeta(default, (-0.5, 0.5, -0.5))
    r = chain.residues[2]
    np.testing.assert_allclose(custom.residues[2].cb,
                               virtual_cbeta(r.n, r.ca, r.c, (-0.5, 0.5, -0.5)))
    assert not np.allclose(custom.residues[2].cb, default.residues[2].cb)
