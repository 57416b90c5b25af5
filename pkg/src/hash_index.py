"""
Packed binary-code database with exhaustive Hamming search and the POSHIDX1
file format.
"""
import logging
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.binfmt import ByteReader
from src.encoder import HashCode
from src.errors import (
    BadMagic, ChecksumMismatch, LengthMismatch, MalformedRecord, VersionMismatch
)

logger = logging.getLogger(__name__)

INDEX_MAGIC = b'POSHIDX1'
INDEX_VERSION = 1

_POPCOUNT_LUT = np.array([bin(i).count('1') for i in range(256)], dtype=np.uint8)


def code_bytes(d: int) -> int:
    return (d + 7) // 8


def _popcount_rows(x: np.ndarray) -> np.ndarray:
    """Set bits per row of a uint8 matrix."""
    bitwise_count = getattr(np, 'bitwise_count', None)
    if bitwise_count is not None:
        return bitwise_count(x).sum(axis=-1, dtype=np.int64)
    return _POPCOUNT_LUT[x].sum(axis=-1, dtype=np.int64)


def _pad_mask(d: int) -> np.ndarray:
    """Byte mask that zeroes the bits past position d in the last byte."""
    mask = np.full(code_bytes(d), 0xFF, dtype=np.uint8)
    tail = d % 8
    if tail:
        mask[-1] = (1 << tail) - 1
    return mask


def hamming(a: np.ndarray, b: np.ndarray, d: int) -> int:
    """Differing bits between two packed codes of length d."""
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    if a.shape != (code_bytes(d),) or b.shape != (code_bytes(d),):
        raise LengthMismatch(f"Codes of {a.size}/{b.size} bytes for d={d}")
    return int(_popcount_rows((a ^ b) & _pad_mask(d)))


def scaled_distance(hamming_distance, l_q, l_t, l_max, mode: str = 'divide'):
    """
    Length-adjusted distance dist / (1 + |l_q - l_t| / l_max).

    `multiply` uses dist * (1 + |l_q - l_t| / l_max) instead. Works on scalars
    and numpy arrays alike.
    """
    factor = 1.0 + np.abs(np.asarray(l_q, dtype=np.float64) - l_t) / float(l_max)
    if mode == 'divide':
        out = np.asarray(hamming_distance, dtype=np.float64) / factor
    elif mode == 'multiply':
        out = np.asarray(hamming_distance, dtype=np.float64) * factor
    else:
        raise ValueError(f"Unknown scale mode {mode!r}")
    return float(out) if out.ndim == 0 else out


@dataclass
class SearchHit:
    id: str
    hamming: int
    scaled: float
    n_residues: int


class CodeDatabase:
    """Immutable table of packed codes with their chain lengths."""

    def __init__(self, code_length: int, ids: Sequence[str], codes: np.ndarray,
                 n_residues: Sequence[int]):
        self.code_length = code_length
        self.ids = list(ids)
        self.codes = np.array(codes, dtype=np.uint8).reshape(len(self.ids), code_bytes(code_length))
        self.n_residues = np.asarray(n_residues, dtype=np.int64)
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("Database ids must be unique")
        if len(self.n_residues) != len(self.ids):
            raise ValueError("One length per entry is required")
        self.codes &= _pad_mask(code_length)
        self.l_max = int(self.n_residues.max()) if len(self.ids) else 0
        # Lexicographic id rank for the final tie break
        self.id_rank = np.empty(len(self.ids), dtype=np.int64)
        order = np.argsort(np.array(self.ids, dtype=object), kind='stable')
        self.id_rank[order] = np.arange(len(self.ids))

    @classmethod
    def from_codes(cls, codes: Iterable[HashCode]) -> 'CodeDatabase':
        codes = list(codes)
        if not codes:
            raise ValueError("from_codes needs at least one code (use CodeDatabase.empty)")
        d = codes[0].code_length
        for c in codes:
            if c.code_length != d:
                raise LengthMismatch(f"{c.id}: code length {c.code_length}, expected {d}")
        return cls(d, [c.id for c in codes], np.stack([c.bits for c in codes]),
                   [c.n_residues for c in codes])

    @classmethod
    def empty(cls, code_length: int) -> 'CodeDatabase':
        return cls(code_length, [], np.zeros((0, code_bytes(code_length)), dtype=np.uint8), [])

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other):
        if not isinstance(other, CodeDatabase):
            return NotImplemented
        return (self.code_length == other.code_length and self.ids == other.ids
                and np.array_equal(self.codes, other.codes)
                and np.array_equal(self.n_residues, other.n_residues))

    def code(self, i: int) -> HashCode:
        return HashCode(self.codes[i].copy(), self.code_length, int(self.n_residues[i]), self.ids[i])

    def distances(self, query: HashCode, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
        """Hamming distance from query to entries [start, stop)."""
        if query.code_length != self.code_length:
            raise LengthMismatch(f"Query has {query.code_length} bits, database {self.code_length}")
        q = np.asarray(query.bits, dtype=np.uint8) & _pad_mask(self.code_length)
        return _popcount_rows(self.codes[start:stop] ^ q)


def _rank_block(db: CodeDatabase, query: HashCode, k: int, start: int, stop: int,
                mode: str, use_length_scaling: bool) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(indices, hamming, scaled) of the block's top-k under (scaled, hamming, id) order."""
    ham = db.distances(query, start, stop)
    if use_length_scaling:
        scaled = scaled_distance(ham, query.n_residues, db.n_residues[start:stop], db.l_max, mode)
    else:
        scaled = ham.astype(np.float64)
    idx = np.arange(start, stop)
    if len(idx) > k:
        # Keep everything tied with the k-th scaled value, then order exactly
        kth = np.partition(scaled, k - 1)[k - 1]
        keep = scaled <= kth
        idx, ham, scaled = idx[keep], ham[keep], scaled[keep]
    order = np.lexsort((db.id_rank[idx], ham, scaled))
    return idx[order[:k]], ham[order[:k]], scaled[order[:k]]


def search(db: CodeDatabase, query: HashCode, k: int, scale_mode: str = 'divide',
           use_length_scaling: bool = True, threads: int = 1) -> List[SearchHit]:
    """
    Exact top-k by scaled distance, ties broken by Hamming distance then id.

    Args:
        db: Database to scan
        query: Query code (same length as the database)
        k: Hits to return
        scale_mode: 'divide' or 'multiply'
        use_length_scaling: False ranks by raw Hamming distance
        threads: Contiguous shards scanned in parallel

    Returns:
        min(k, len(db)) hits
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if query.code_length != db.code_length:
        raise LengthMismatch(f"Query has {query.code_length} bits, database {db.code_length}")
    n = len(db)
    if n == 0:
        return []
    shards = max(1, min(threads, n))
    bounds = np.linspace(0, n, shards + 1, dtype=np.int64)
    jobs = [(int(bounds[s]), int(bounds[s + 1])) for s in range(shards)]

    def work(job):
        return _rank_block(db, query, k, job[0], job[1], scale_mode, use_length_scaling)

    if shards > 1:
        with ThreadPoolExecutor(max_workers=shards) as pool:
            parts = list(pool.map(work, jobs))
    else:
        parts = [work(jobs[0])]

    idx = np.concatenate([p[0] for p in parts])
    ham = np.concatenate([p[1] for p in parts])
    scaled = np.concatenate([p[2] for p in parts])
    order = np.lexsort((db.id_rank[idx], ham, scaled))[:k]
    return [SearchHit(db.ids[i], int(ham[o]), float(scaled[o]), int(db.n_residues[i]))
            for o, i in zip(order, idx[order])]


# Index file (little-endian):
#   magic, u16 version, u32 d, u64 count, u32 l_max,
#   per entry: u16 id length, UTF-8 id, u32 n_residues, ceil(d/8) code bytes,
#   u32 CRC32 of the entry section

def save(db: CodeDatabase) -> bytes:
    entries = []
    for i, name in enumerate(db.ids):
        encoded = name.encode('utf-8')
        entries.append(struct.pack('<H', len(encoded)) + encoded
                       + struct.pack('<I', int(db.n_residues[i])) + db.codes[i].tobytes())
    payload = b''.join(entries)
    header = INDEX_MAGIC + struct.pack('<HIQI', INDEX_VERSION, db.code_length, len(db), db.l_max)
    return header + payload + struct.pack('<I', zlib.crc32(payload))


def load(data: bytes) -> CodeDatabase:
    reader = ByteReader(data)
    if reader.take(len(INDEX_MAGIC)) != INDEX_MAGIC:
        raise BadMagic("Not an index file (expected POSHIDX1)")
    version, d, count, l_max = reader.unpack('<HIQI')
    if version != INDEX_VERSION:
        raise VersionMismatch(f"Index version {version}, expected {INDEX_VERSION}")
    payload_start = reader.offset
    width = code_bytes(d)
    ids, lengths, codes = [], [], []
    for _ in range(count):
        (name_len,) = reader.unpack('<H')
        ids.append(reader.take(name_len).decode('utf-8'))
        (n_res,) = reader.unpack('<I')
        lengths.append(n_res)
        codes.append(np.frombuffer(reader.take(width), dtype=np.uint8))
    payload = data[payload_start:reader.offset]
    (crc,) = reader.unpack('<I')
    if crc != zlib.crc32(payload):
        raise ChecksumMismatch("Index payload checksum does not match")
    if not reader.at_end:
        raise MalformedRecord(f"{len(data) - reader.offset} trailing bytes after index")
    if not count:
        return CodeDatabase.empty(d)
    db = CodeDatabase(d, ids, np.stack(codes), lengths)
    if db.l_max != l_max:
        logger.warning(f"Stored l_max {l_max} differs from recomputed {db.l_max}")
    return db


def save_index(path: str, db: CodeDatabase):
    with open(path, 'wb') as f:
        f.write(save(db))
    logger.info(f"Wrote index of {len(db)} codes ({db.code_length} bits) to {path}")


def load_index(path: str) -> CodeDatabase:
    with open(path, 'rb') as f:
        return load(f.read())


def payload_size(db: CodeDatabase) -> Dict[str, int]:
    """Byte accounting of the index file: codes, ids and everything else."""
    total = len(save(db))
    id_bytes = sum(2 + len(name.encode('utf-8')) for name in db.ids)
    return {'total': total, 'codes': len(db) * code_bytes(db.code_length),
            'ids': id_bytes, 'without_ids': total - id_bytes}


# Codes file: one line per structure, id<TAB>n_residues<TAB>d<TAB>hex bits

def write_codes(path: str, codes: Iterable[HashCode]) -> int:
    count = 0
    with open(path, 'w', encoding='utf-8') as f:
        for c in codes:
            f.write(f"{c.id}\t{c.n_residues}\t{c.code_length}\t{c.to_hex()}\n")
            count += 1
    return count


def parse_codes(text: str) -> List[HashCode]:
    codes = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split('\t')
        try:
            name, n_res, d, hex_bits = parts
            code = HashCode.from_hex(hex_bits, int(d), int(n_res), name)
        except ValueError:
            raise MalformedRecord(f"Codes line {lineno}: expected id, n_residues, d, hex")
        if len(code.bits) != code_bytes(code.code_length):
            raise LengthMismatch(f"Codes line {lineno}: {len(code.bits)} bytes for d={d}")
        codes.append(code)
    return codes


def read_codes(path: str) -> List[HashCode]:
    with open(path, 'r', encoding='utf-8') as f:
        return parse_codes(f.read())


def format_hits(hits: Sequence[SearchHit], query_id: Optional[str] = None) -> str:
    """TSV rows: [query,] rank, id, hamming, scaled, n_residues."""
    prefix = f"{query_id}\t" if query_id is not None else ''
    return ''.join(f"{prefix}{rank}\t{h.id}\t{h.hamming}\t{h.scaled:.6f}\t{h.n_residues}\n"
                   for rank, h in enumerate(hits, start=1))
