"""
Kabsch superposition and TM-score over a known residue correspondence, plus
the pairwise similarity matrix shared with sampling and evaluation.
"""
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.binfmt import read_file
from src.errors import (
    BadMagic, CorrespondenceTooShort, DegeneratePointSet, IndexOutOfRange,
    MalformedRecord, PoshError, WindowOutOfRange
)
from src.protein_io import ProteinChain

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 20
MIN_SEED = 4
MATRIX_MAGIC = b'POSHTMM1'
# Similarity assigned to pairs without a measured score
MISSING_SCORE = 0.0
# Slack for comparing scores against thresholds (superposition round-off)
TM_TOLERANCE = 1e-9


@dataclass
class Superposition:
    """x -> rotation @ x + translation maps the moving set onto the fixed set."""
    rotation: np.ndarray
    translation: np.ndarray
    rmsd: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation


@dataclass
class TmResult:
    score: float
    aligned_length: int
    d0: float
    superposition: Optional[Superposition] = None


def kabsch(x: np.ndarray, y: np.ndarray) -> Superposition:
    """
    Least-squares rigid superposition of x onto y.

    Args:
        x: Moving points, shape (n, 3)
        y: Fixed points, shape (n, 3)

    Returns:
        Proper rotation, translation and the resulting RMSD
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3:
        raise DegeneratePointSet(f"kabsch needs two (n, 3) arrays, got {x.shape} and {y.shape}")
    if len(x) < 3:
        raise DegeneratePointSet(f"kabsch needs at least 3 points, got {len(x)}")

    cx = x.mean(axis=0)
    cy = y.mean(axis=0)
    xc = x - cx
    yc = y - cy
    # Rank < 2 means a collinear (or coincident) moving set
    sv = np.linalg.svd(xc, compute_uv=False)
    if sv[0] == 0.0 or sv[1] <= 1e-10 * sv[0]:
        raise DegeneratePointSet("Point set is collinear")

    u, _, vt = np.linalg.svd(xc.T @ yc)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    translation = cy - rotation @ cx
    residual = xc @ rotation.T - yc
    rmsd = float(np.sqrt(np.mean(np.sum(residual * residual, axis=1))))
    return Superposition(rotation, translation, rmsd)


def d0(l_target: int) -> float:
    """TM-score distance scale for a reference of l_target residues."""
    if l_target < 1:
        raise ValueError("l_target must be >= 1")
    return max(1.24 * np.cbrt(max(l_target - 15, 0)) - 1.8, 0.5)


def identity_correspondence(a: ProteinChain, b: ProteinChain) -> List[Tuple[int, int]]:
    return [(i, i) for i in range(min(len(a), len(b)))]


def _select(dist: np.ndarray, cutoff: float) -> np.ndarray:
    """Pairs within cutoff, widening the cutoff by 1 Å until at least three qualify."""
    while True:
        chosen = np.flatnonzero(dist < cutoff)
        if len(chosen) >= 3:
            return chosen
        cutoff += 1.0


def tm_score_identity(a: ProteinChain, b: ProteinChain,
                      correspondence: Optional[Sequence[Tuple[int, int]]] = None) -> TmResult:
    """
    TM-score of a against reference b over a fixed residue correspondence.

    Seeds are contiguous runs of the correspondence of length n, n/2 and n/4
    (at least 4); each seed is refined by re-superposing on the pairs closer
    than d0 until the selection stops changing. The best score over all seeds
    is returned, normalized by |b|.

    Args:
        a: Moving structure
        b: Reference structure (its length normalizes the score)
        correspondence: (index in a, index in b) pairs; identity by default

    Returns:
        TmResult with the best score found
    """
    pairs = np.asarray(correspondence if correspondence is not None
                       else identity_correspondence(a, b), dtype=np.int64).reshape(-1, 2)
    n = len(pairs)
    if n < 3:
        raise CorrespondenceTooShort(f"Need at least 3 corresponding residues, got {n}")
    if pairs.min() < 0 or pairs[:, 0].max() >= len(a) or pairs[:, 1].max() >= len(b):
        raise IndexOutOfRange("Correspondence index outside the chains")

    x = a.ca_coords()[pairs[:, 0]]
    y = b.ca_coords()[pairs[:, 1]]
    l_target = len(b)
    scale = d0(l_target)
    upper = n / l_target

    best = TmResult(score=0.0, aligned_length=0, d0=scale)
    stride = max(n // 10, 1)
    seed_lengths = sorted({min(n, max(n // div, MIN_SEED)) for div in (1, 2, 4)}, reverse=True)

    for seed in seed_lengths:
        starts = list(range(0, n - seed + 1, stride))
        if starts[-1] != n - seed:
            starts.append(n - seed)
        for start in starts:
            subset = np.arange(start, start + seed)
            for _ in range(MAX_ITERATIONS):
                try:
                    sup = kabsch(x[subset], y[subset])
                except DegeneratePointSet:
                    break
                diff = sup.apply(x) - y
                dist = np.sqrt(np.sum(diff * diff, axis=1))
                score = float(np.sum(1.0 / (1.0 + (dist / scale) ** 2)) / l_target)
                if score > best.score:
                    best = TmResult(score, int(np.sum(dist < scale)), scale, sup)
                    if best.score >= upper - 1e-12:
                        return best
                chosen = _select(dist, scale)
                if np.array_equal(chosen, subset):
                    break
                subset = chosen
    if best.score <= 0.0:
        raise DegeneratePointSet("No seed fragment could be superposed")
    return best


def tm_fragment(p: ProteinChain, start: int, length: int) -> TmResult:
    """TM-score of the window [start, start+length) of p against the whole of p."""
    if start < 0 or length < 1 or start + length > len(p):
        raise WindowOutOfRange(f"Window [{start}, {start + length}) outside chain of {len(p)}")
    fragment = p.window(start, length)
    correspondence = [(i, start + i) for i in range(length)]
    return tm_score_identity(fragment, p, correspondence)


def pair_scores(a: ProteinChain, b: ProteinChain,
                correspondence: Optional[Sequence[Tuple[int, int]]] = None) -> Tuple[float, float]:
    """(TM normalized by |a|, TM normalized by |b|) over one correspondence."""
    pairs = list(correspondence) if correspondence is not None else identity_correspondence(a, b)
    tm_ab = tm_score_identity(b, a, [(j, i) for i, j in pairs]).score
    tm_ba = tm_score_identity(a, b, pairs).score
    return tm_ab, tm_ba


# ---------------------------------------------------------------- similarity matrix

@dataclass
class SimilarityMatrix:
    """scores[a][b] is the TM-score of the pair normalized by the length of a."""
    ids: List[str]
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float32)
        n = len(self.ids)
        if self.scores.shape != (n, n):
            raise ValueError(f"Score matrix {self.scores.shape} for {n} ids")
        self._rank: Dict[str, int] = {name: i for i, name in enumerate(self.ids)}
        if len(self._rank) != n:
            raise ValueError("Similarity matrix ids must be unique")

    def __len__(self) -> int:
        return len(self.ids)

    def index(self, name: str) -> int:
        try:
            return self._rank[name]
        except KeyError:
            raise IndexOutOfRange(f"{name!r} is not in the similarity matrix")

    def normalized(self, mode: str = 'query') -> np.ndarray:
        """Rows are queries; `target` divides by the other structure's length, `max` takes both."""
        if mode == 'query':
            return self.scores
        if mode == 'target':
            return self.scores.T
        if mode == 'max':
            return np.maximum(self.scores, self.scores.T)
        raise ValueError(f"Unknown TM normalization {mode!r}")

    def subset(self, ids: Sequence[str]) -> 'SimilarityMatrix':
        rows = [self.index(name) for name in ids]
        return SimilarityMatrix(list(ids), self.scores[np.ix_(rows, rows)])


def build_matrix(ids: Sequence[str], pair_values: Iterable[Tuple[str, str, float, float]]
                 ) -> SimilarityMatrix:
    """Dense matrix from (id_a, id_b, tm_ab, tm_ba) rows; unlisted pairs get MISSING_SCORE."""
    ids = list(ids)
    rank = {name: i for i, name in enumerate(ids)}
    scores = np.full((len(ids), len(ids)), MISSING_SCORE, dtype=np.float32)
    np.fill_diagonal(scores, 1.0)
    for id_a, id_b, tm_ab, tm_ba in pair_values:
        i, j = rank[id_a], rank[id_b]
        scores[i, j] = tm_ab
        scores[j, i] = tm_ba
    return SimilarityMatrix(ids, scores)


def score_all_pairs(chains: Sequence[ProteinChain],
                    pairs: Optional[Sequence[Tuple[int, int]]] = None,
                    threads: int = 1) -> List[Tuple[str, str, float, float]]:
    """
    Identity-correspondence TM-scores for chain pairs.

    Args:
        chains: Structures to compare
        pairs: Index pairs (default: every unordered pair)
        threads: Worker threads

    Returns:
        (id_a, id_b, tm_ab, tm_ba) rows in pair order; failing pairs are logged and dropped
    """
    if pairs is None:
        pairs = [(i, j) for i in range(len(chains)) for j in range(i + 1, len(chains))]

    def work(pair):
        i, j = pair
        try:
            tm_ab, tm_ba = pair_scores(chains[i], chains[j])
        except PoshError as e:
            logger.error(f"TM-score failed for {chains[i].id}/{chains[j].id}: {e}")
            return None
        return chains[i].id, chains[j].id, tm_ab, tm_ba

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(work, pairs))
    else:
        rows = [work(p) for p in pairs]
    return [r for r in rows if r is not None]


def format_pair_rows(rows: Iterable[Tuple[str, str, float, float]]) -> str:
    return ''.join(f"{a}\t{b}\t{ab:.6f}\t{ba:.6f}\n" for a, b, ab, ba in rows)


def write_similarity_tsv(path: str, matrix: SimilarityMatrix):
    """One line per unordered pair: id_a, id_b, tm_ab, tm_ba."""
    rows = []
    n = len(matrix)
    for i in range(n):
        for j in range(i + 1, n):
            rows.append((matrix.ids[i], matrix.ids[j],
                         float(matrix.scores[i, j]), float(matrix.scores[j, i])))
    with open(path, 'w', encoding='utf-8') as f:
        f.write(format_pair_rows(rows))


def parse_similarity_tsv(text: str) -> SimilarityMatrix:
    ids: List[str] = []
    seen = set()
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith('#'):
            continue
        parts = line.split('\t')
        if len(parts) != 4:
            raise MalformedRecord(f"Similarity line {lineno}: expected 4 tab-separated fields")
        try:
            tm_ab, tm_ba = float(parts[2]), float(parts[3])
        except ValueError:
            raise MalformedRecord(f"Similarity line {lineno}: non-numeric score")
        for name in parts[:2]:
            if name not in seen:
                seen.add(name)
                ids.append(name)
        rows.append((parts[0], parts[1], tm_ab, tm_ba))
    return build_matrix(ids, rows)


# Binary cache: magic, u32 n, n x (u16 id length, UTF-8 id), f32 n x n scores

def save_matrix_cache(path: str, matrix: SimilarityMatrix):
    parts = [MATRIX_MAGIC, struct.pack('<I', len(matrix))]
    for name in matrix.ids:
        encoded = name.encode('utf-8')
        parts.append(struct.pack('<H', len(encoded)) + encoded)
    parts.append(matrix.scores.astype('<f4').tobytes())
    with open(path, 'wb') as f:
        f.write(b''.join(parts))


def load_matrix_cache(path: str) -> SimilarityMatrix:
    reader = read_file(path)
    if reader.take(len(MATRIX_MAGIC)) != MATRIX_MAGIC:
        raise BadMagic(f"{path} is not a similarity cache (expected POSHTMM1)")
    (n,) = reader.unpack('<I')
    ids = []
    for _ in range(n):
        (name_len,) = reader.unpack('<H')
        ids.append(reader.take(name_len).decode('utf-8'))
    scores = np.frombuffer(reader.take(n * n * 4), dtype='<f4').reshape(n, n)
    return SimilarityMatrix(ids, scores.copy())


def load_similarity(path: str) -> SimilarityMatrix:
    """Read either the TSV pair list or the binary cache (detected by magic)."""
    with open(path, 'rb') as f:
        head = f.read(len(MATRIX_MAGIC))
    if head == MATRIX_MAGIC:
        return load_matrix_cache(path)
    with open(path, 'r', encoding='utf-8') as f:
        matrix = parse_similarity_tsv(f.read())
    logger.info(f"Loaded similarity matrix for {len(matrix)} structures from {path}")
    return matrix
