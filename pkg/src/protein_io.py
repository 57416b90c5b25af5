"""
Protein structure parsing and the internal chain format.

Reads PDB fixed-column ATOM records into an ordered backbone representation
(N, CA, C, O, CB per residue) and synthesizes a virtual CB where the real atom
is missing.
"""
import logging
import struct
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.binfmt import ByteReader
from src.config import CBETA_WEIGHTS
from src.errors import BadMagic, ChainTooShort, MalformedRecord, NoChainFound

logger = logging.getLogger(__name__)

BACKBONE_ATOMS = ('N', 'CA', 'C', 'O')
READ_ATOMS = BACKBONE_ATOMS + ('CB',)
MIN_CHAIN_LENGTH = 3

CHAIN_MAGIC = b'POSHCHN1'


@dataclass(frozen=True)
class Residue:
    """One residue; coordinates are float64 arrays of shape (3,)."""
    index: int
    n: np.ndarray
    ca: np.ndarray
    c: np.ndarray
    o: np.ndarray
    cb: Optional[np.ndarray] = None
    cb_is_virtual: bool = False

    def __eq__(self, other):
        if not isinstance(other, Residue):
            return NotImplemented
        if self.index != other.index or self.cb_is_virtual != other.cb_is_virtual:
            return False
        if (self.cb is None) != (other.cb is None):
            return False
        pairs = [(self.n, other.n), (self.ca, other.ca), (self.c, other.c), (self.o, other.o)]
        if self.cb is not None:
            pairs.append((self.cb, other.cb))
        return all(np.array_equal(a, b) for a, b in pairs)

    __hash__ = None


@dataclass(frozen=True)
class ProteinChain:
    """Ordered residues of a single chain."""
    id: str
    residues: Tuple[Residue, ...]

    def __len__(self) -> int:
        return len(self.residues)

    def atom_array(self, order: Sequence[str] = ('n', 'ca', 'c', 'o', 'cb')) -> np.ndarray:
        """Coordinates as an (n, len(order), 3) float64 array."""
        return np.array([[getattr(r, name) for name in order] for r in self.residues],
                        dtype=np.float64)

    def ca_coords(self) -> np.ndarray:
        return np.array([r.ca for r in self.residues], dtype=np.float64)

    def transformed(self, rotation: np.ndarray, translation: np.ndarray) -> 'ProteinChain':
        """Apply x -> R x + t to every atom."""
        def move(v):
            return None if v is None else rotation @ v + translation
        residues = tuple(
            replace(r, n=move(r.n), ca=move(r.ca), c=move(r.c), o=move(r.o), cb=move(r.cb))
            for r in self.residues
        )
        return ProteinChain(self.id, residues)

    def window(self, start: int, length: int, new_id: Optional[str] = None) -> 'ProteinChain':
        """Contiguous sub-chain with residues re-indexed from zero."""
        picked = self.residues[start:start + length]
        residues = tuple(replace(r, index=i) for i, r in enumerate(picked))
        return ProteinChain(new_id or self.id, residues)


def _vec(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64)


def _parse_atom_line(line: str, lineno: int) -> Dict:
    """Split one ATOM record into its fixed columns."""
    try:
        occupancy_text = line[54:60].strip()
        return {
            'name': line[12:16].strip(),
            'altloc': line[16:17].strip(),
            'chain': line[21:22].strip(),
            'res_seq': int(line[22:26]),
            'icode': line[26:27].strip(),
            'xyz': _vec([float(line[30:38]), float(line[38:46]), float(line[46:54])]),
            'occupancy': float(occupancy_text) if occupancy_text else 1.0,
        }
    except (ValueError, IndexError) as e:
        raise MalformedRecord(f"Line {lineno}: cannot parse ATOM record ({e})")


def parse_pdb(data: bytes, chain_id: Optional[str] = None,
              structure_id: Optional[str] = None) -> ProteinChain:
    """
    Parse PDB text into a single backbone chain.

    Args:
        data: Raw PDB file bytes
        chain_id: Chain to select (default: first chain with ATOM records)
        structure_id: Id for the chain (default: "chain_<id>")

    Returns:
        ProteinChain with Cβ where present in the file (not yet synthesized)
    """
    text = data.decode('utf-8', errors='replace') if isinstance(data, (bytes, bytearray)) else data

    selected = chain_id
    # residue key -> atom name -> (occupancy, xyz); insertion order = file order
    residues: Dict[Tuple[int, str], Dict[str, Tuple[float, np.ndarray]]] = {}
    first_icode: Dict[int, str] = {}

    for lineno, line in enumerate(text.splitlines(), start=1):
        record = line[:6]
        if record.startswith('ENDMDL'):
            break
        if record != 'ATOM  ':
            continue
        name = line[12:16].strip()
        if name not in READ_ATOMS:
            continue
        atom = _parse_atom_line(line, lineno)

        if selected is None:
            selected = atom['chain']
        if atom['chain'] != selected:
            continue

        res_seq = atom['res_seq']
        icode = first_icode.setdefault(res_seq, atom['icode'])
        if atom['icode'] != icode:
            continue

        atoms = residues.setdefault((res_seq, icode), {})
        previous = atoms.get(name)
        # Highest occupancy wins; ties keep the first occurrence
        if previous is None or atom['occupancy'] > previous[0]:
            atoms[name] = (atom['occupancy'], atom['xyz'])

    if selected is None or not residues:
        wanted = f"chain {chain_id!r}" if chain_id is not None else "any chain"
        raise NoChainFound(f"No ATOM records found for {wanted}")

    kept: List[Residue] = []
    dropped = 0
    for atoms in residues.values():
        if any(a not in atoms for a in BACKBONE_ATOMS):
            dropped += 1
            continue
        ca = atoms['CA'][1]
        if kept and np.array_equal(kept[-1].ca, ca):
            dropped += 1
            continue
        cb = atoms['CB'][1] if 'CB' in atoms else None
        kept.append(Residue(
            index=len(kept),
            n=atoms['N'][1], ca=ca, c=atoms['C'][1], o=atoms['O'][1],
            cb=cb, cb_is_virtual=False,
        ))

    if dropped:
        logger.warning(f"Dropped {dropped} residues with incomplete backbone in chain {selected!r}")

    if len(kept) < MIN_CHAIN_LENGTH:
        raise ChainTooShort(f"Chain {selected!r} has {len(kept)} complete residues "
                            f"(need {MIN_CHAIN_LENGTH})")

    chain_name = structure_id if structure_id is not None else f"chain_{selected or '_'}"
    return ProteinChain(chain_name, tuple(kept))


def virtual_cbeta(n: np.ndarray, ca: np.ndarray, c: np.ndarray,
                  weights: Sequence[float] = CBETA_WEIGHTS) -> np.ndarray:
    """
    Cβ = Cα + w_a·(b×c) + w_b·b + w_c·c with b = Cα−N, c = C−Cα.

    Collinear N, Cα, C give b×c = 0 and fall back to Cα + w_b·b + w_c·c.
    """
    w_a, w_b, w_c = weights
    b = ca - n
    c_vec = c - ca
    a = np.cross(b, c_vec)
    return ca + w_a * a + w_b * b + w_c * c_vec


def ensure_cbeta(chain: ProteinChain,
                 weights: Sequence[float] = CBETA_WEIGHTS) -> ProteinChain:
    """
    Fill in a virtual Cβ for every residue without a real one.

    Virtual positions already on the chain are recomputed with `weights`, so a
    chain read back from disk picks up the configured constants.
    """
    residues = tuple(
        r if (r.cb is not None and not r.cb_is_virtual)
        else replace(r, cb=virtual_cbeta(r.n, r.ca, r.c, weights), cb_is_virtual=True)
        for r in chain.residues
    )
    return ProteinChain(chain.id, residues)


def format_pdb(chain: ProteinChain, chain_letter: str = 'A') -> str:
    """Write ATOM records (CB only when real) for a chain."""
    lines = []
    serial = 1
    for r in chain.residues:
        res_name = 'GLY' if (r.cb is None or r.cb_is_virtual) else 'ALA'
        atoms = [('N', r.n), ('CA', r.ca), ('C', r.c), ('O', r.o)]
        if r.cb is not None and not r.cb_is_virtual:
            atoms.append(('CB', r.cb))
        for name, xyz in atoms:
            lines.append(
                f"ATOM  {serial:5d}  {name:<3s} {res_name} {chain_letter}{r.index + 1:4d}    "
                f"{xyz[0]:8.3f}{xyz[1]:8.3f}{xyz[2]:8.3f}{1.0:6.2f}{0.0:6.2f}"
                f"           {name[0]}"
            )
            serial += 1
    lines.append('TER')
    lines.append('END')
    return '\n'.join(lines) + '\n'


# Internal binary format (little-endian):
#   magic, u16 id length, UTF-8 id, u32 residue count,
#   per residue 5x3 f64 (N, CA, C, O, CB) + u8 flag (1 = virtual CB)

def serialize_chain(chain: ProteinChain) -> bytes:
    if any(r.cb is None for r in chain.residues):
        chain = ensure_cbeta(chain)
    name = chain.id.encode('utf-8')
    parts = [CHAIN_MAGIC, struct.pack('<H', len(name)), name,
             struct.pack('<I', len(chain))]
    for r in chain.residues:
        coords = np.stack([r.n, r.ca, r.c, r.o, r.cb]).astype('<f8')
        parts.append(coords.tobytes())
        parts.append(struct.pack('<B', 1 if r.cb_is_virtual else 0))
    return b''.join(parts)


def _read_chain(reader: ByteReader) -> ProteinChain:
    if reader.take(len(CHAIN_MAGIC)) != CHAIN_MAGIC:
        raise BadMagic("Not a chain record (expected POSHCHN1)")
    (name_len,) = reader.unpack('<H')
    name = reader.take(name_len).decode('utf-8')
    (count,) = reader.unpack('<I')
    residues = []
    for i in range(count):
        coords = np.frombuffer(reader.take(15 * 8), dtype='<f8').reshape(5, 3).astype(np.float64)
        (flag,) = reader.unpack('<B')
        residues.append(Residue(index=i, n=coords[0], ca=coords[1], c=coords[2],
                                o=coords[3], cb=coords[4], cb_is_virtual=bool(flag)))
    return ProteinChain(name, tuple(residues))


def deserialize_chain(data: bytes) -> ProteinChain:
    return _read_chain(ByteReader(data))


def write_chains(path: str, chains: Iterable[ProteinChain]) -> int:
    """Write chain records back to back; returns the count written."""
    count = 0
    with open(path, 'wb') as f:
        for chain in chains:
            f.write(serialize_chain(chain))
            count += 1
    return count


def read_chains(path: str) -> List[ProteinChain]:
    with open(path, 'rb') as f:
        reader = ByteReader(f.read())
    chains = []
    while not reader.at_end:
        chains.append(_read_chain(reader))
    return chains
