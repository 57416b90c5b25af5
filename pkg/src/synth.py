"""
Synthetic protein families with known ground-truth similarity.

Each family is a random self-avoiding backbone built from ideal bond geometry;
members are noisy, rigidly moved copies of the family template.
"""
import logging
import os
from dataclasses import dataclass, fields
from typing import List, Optional, Tuple

import numpy as np

from src.errors import ConfigError, DegenerateGeometry
from src.protein_io import ProteinChain, Residue, format_pdb
from src.tmscore import SimilarityMatrix, pair_scores, write_similarity_tsv

logger = logging.getLogger(__name__)

# Ideal backbone geometry (Å, degrees)
BOND_N_CA = 1.46
BOND_CA_C = 1.52
BOND_C_N = 1.33
BOND_C_O = 1.23
ANGLE_N_CA_C = 111.0
ANGLE_CA_C_N = 116.0
ANGLE_C_N_CA = 122.0
ANGLE_CA_C_O = 120.5
OMEGA = 180.0

CROSS_FAMILY_TM = 0.17
MIN_CA_SEPARATION = 3.0
MAX_RESIDUE_RETRIES = 50
MAX_CHAIN_RESTARTS = 20

# (phi, psi) centres in degrees and the run lengths each state tends to form
_STATES = {
    'helix': ((-57.0, -47.0), (6, 14)),
    'strand': ((-120.0, 130.0), (4, 9)),
    'coil': ((-75.0, 145.0), (2, 5)),
}


@dataclass
class FamilySpec:
    n_families: int = 30
    members: int = 6
    min_length: int = 40
    max_length: int = 80
    sigma: float = 0.5
    seed: int = 0

    def validate(self) -> 'FamilySpec':
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.min_length < 10 or self.max_length < self.min_length:
            raise ConfigError("Chain lengths must satisfy 10 <= min_length <= max_length")
        if self.n_families < 1 or self.members < 1:
            raise ConfigError("n_families and members must be >= 1")
        return self

    @classmethod
    def from_text(cls, text: str) -> 'FamilySpec':
        """`key = value` lines, same syntax as run config files."""
        known = {f.name for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            key, sep, value = (part.strip() for part in line.partition('='))
            if not sep or key not in known:
                raise ConfigError(f"Family spec line {lineno}: unknown or malformed entry")
            try:
                values[key] = float(value) if key == 'sigma' else int(value)
            except ValueError:
                raise ConfigError(f"Family spec line {lineno}: bad value {value!r}")
        return cls(**values).validate()


@dataclass
class SyntheticDataset:
    chains: List[ProteinChain]
    families: List[int]
    matrix: SimilarityMatrix


def place_atom(a: np.ndarray, b: np.ndarray, c: np.ndarray, bond: float,
               angle_deg: float, torsion_deg: float) -> np.ndarray:
    """Position d with |cd| = bond, angle bcd and torsion abcd as given."""
    angle = np.radians(angle_deg)
    torsion = np.radians(torsion_deg)
    bc = c - b
    bc /= np.linalg.norm(bc)
    n = np.cross(b - a, bc)
    norm = np.linalg.norm(n)
    if norm == 0:
        raise DegenerateGeometry("Reference atoms are collinear")
    n /= norm
    m = np.cross(n, bc)
    local = np.array([-bond * np.cos(angle),
                      bond * np.sin(angle) * np.cos(torsion),
                      bond * np.sin(angle) * np.sin(torsion)])
    return c + local[0] * bc + local[1] * m + local[2] * n


def _torsion_sequence(length: int, rng: np.random.Generator) -> np.ndarray:
    """Per-residue (phi, psi) drawn as runs of helix, strand and coil."""
    out = np.empty((length, 2))
    names = list(_STATES)
    i = 0
    while i < length:
        centre, (lo, hi) = _STATES[names[rng.integers(len(names))]]
        run = int(rng.integers(lo, hi + 1))
        for j in range(i, min(i + run, length)):
            out[j] = np.asarray(centre) + rng.normal(0.0, 10.0, size=2)
        i += run
    return out


def _try_backbone(length: int, rng: np.random.Generator) -> Optional[np.ndarray]:
    """(length, 4, 3) N/CA/C/O coordinates, or None when the walk gets stuck."""
    torsions = _torsion_sequence(length, rng)
    n0 = np.zeros(3)
    ca0 = np.array([BOND_N_CA, 0.0, 0.0])
    theta = np.radians(180.0 - ANGLE_N_CA_C)
    c0 = ca0 + BOND_CA_C * np.array([np.cos(theta), np.sin(theta), 0.0])
    atoms = [[n0, ca0, c0]]
    for i in range(1, length):
        prev_n, prev_ca, prev_c = atoms[-1]
        for _ in range(MAX_RESIDUE_RETRIES):
            n = place_atom(prev_n, prev_ca, prev_c, BOND_C_N, ANGLE_CA_C_N, torsions[i - 1, 1])
            ca = place_atom(prev_ca, prev_c, n, BOND_N_CA, ANGLE_C_N_CA, OMEGA)
            c = place_atom(prev_c, n, ca, BOND_CA_C, ANGLE_N_CA_C, torsions[i, 0])
            earlier = np.array([a[1] for a in atoms[:-1]]) if len(atoms) > 1 else np.zeros((0, 3))
            if not len(earlier) or np.min(np.linalg.norm(earlier - ca, axis=1)) >= MIN_CA_SEPARATION:
                break
            # Redraw this residue's preceding psi and its phi
            torsions[i - 1, 1] = rng.uniform(-180.0, 180.0)
            torsions[i, 0] = rng.uniform(-180.0, -40.0)
        else:
            return None
        atoms.append([n, ca, c])

    coords = np.zeros((length, 4, 3))
    for i, (n, ca, c) in enumerate(atoms):
        if i + 1 < length:
            o = place_atom(atoms[i + 1][0], ca, c, BOND_C_O, ANGLE_CA_C_O, 180.0)
        else:
            o = place_atom(n, ca, c, BOND_C_O, ANGLE_CA_C_O, torsions[i, 1] + 180.0)
        coords[i] = (n, ca, c, o)
    return coords


def backbone_template(length: int, rng: np.random.Generator) -> np.ndarray:
    """Random self-avoiding backbone as a (length, 4, 3) array."""
    for _ in range(MAX_CHAIN_RESTARTS):
        coords = _try_backbone(length, rng)
        if coords is not None:
            return coords
    raise DegenerateGeometry(f"Could not grow a self-avoiding chain of {length} residues")


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform proper rotation from the QR decomposition of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def chain_from_coords(coords: np.ndarray, chain_id: str) -> ProteinChain:
    residues = tuple(Residue(index=i, n=xyz[0].copy(), ca=xyz[1].copy(), c=xyz[2].copy(),
                             o=xyz[3].copy())
                     for i, xyz in enumerate(coords))
    return ProteinChain(chain_id, residues)


def family_member(template: np.ndarray, sigma: float, rng: np.random.Generator,
                  chain_id: str) -> ProteinChain:
    """Template plus isotropic noise of RMS displacement sigma, then a random rigid motion."""
    noisy = template + rng.normal(0.0, sigma / np.sqrt(3.0), size=template.shape)
    rotation = random_rotation(rng)
    translation = rng.uniform(-20.0, 20.0, size=3)
    return chain_from_coords(noisy @ rotation.T + translation, chain_id)


def generate(spec: FamilySpec) -> SyntheticDataset:
    """
    Build every family and the similarity matrix.

    Within a family, scores come from identity-correspondence TM-scores;
    across families they are fixed at CROSS_FAMILY_TM.

    Args:
        spec: Family layout and noise level

    Returns:
        SyntheticDataset with chains ordered family by family
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    chains: List[ProteinChain] = []
    families: List[int] = []
    for f in range(spec.n_families):
        length = int(rng.integers(spec.min_length, spec.max_length + 1))
        template = backbone_template(length, rng)
        for m in range(spec.members):
            chains.append(family_member(template, spec.sigma, rng, f"fam{f:03d}_m{m:02d}"))
            families.append(f)

    n = len(chains)
    scores = np.full((n, n), CROSS_FAMILY_TM, dtype=np.float32)
    np.fill_diagonal(scores, 1.0)
    for i in range(n):
        for j in range(i + 1, n):
            if families[i] == families[j]:
                scores[i, j], scores[j, i] = pair_scores(chains[i], chains[j])
    logger.info(f"Generated {spec.n_families} families x {spec.members} members "
                f"(sigma={spec.sigma}, seed={spec.seed})")
    return SyntheticDataset(chains, families, SimilarityMatrix([c.id for c in chains], scores))


def write_dataset(dataset: SyntheticDataset, out_dir: str) -> Tuple[List[str], str]:
    """Write one PDB file per chain plus similarity.tsv; returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for chain in dataset.chains:
        path = os.path.join(out_dir, f"{chain.id}.pdb")
        with open(path, 'w', encoding='utf-8') as f:
            f.write(format_pdb(chain))
        paths.append(path)
    matrix_path = os.path.join(out_dir, 'similarity.tsv')
    write_similarity_tsv(matrix_path, dataset.matrix)
    return paths, matrix_path
