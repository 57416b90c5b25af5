"""
Training batch construction: positive sets, negative draws and TM-constrained
substructure windows of positives.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.errors import MalformedRecord, NotEnoughNegatives, SingletonDataset
from src.protein_io import MIN_CHAIN_LENGTH, ProteinChain
from src.tmscore import TM_TOLERANCE, SimilarityMatrix, tm_fragment

logger = logging.getLogger(__name__)


@dataclass
class TrainingBatch:
    query: int
    positive: int
    negatives: List[int]
    window: Optional[Tuple[int, int]] = None


@dataclass
class SubstructurePlan:
    """Per-structure minimum window length such that every window of that length keeps TM >= α."""
    alpha: float
    min_length: Dict[str, int] = field(default_factory=dict)

    def __getitem__(self, structure_id: str) -> int:
        return self.min_length[structure_id]

    def __contains__(self, structure_id: str) -> bool:
        return structure_id in self.min_length


def positives(scores: np.ndarray, a: int, rho: float) -> List[int]:
    """
    Structures b != a with scores[a][b] >= rho * max_{c != a} scores[a][c].

    Args:
        scores: Square score matrix (rows are queries)
        a: Query index
        rho: Relative threshold in (0, 1)

    Returns:
        Sorted indices; never empty
    """
    if not 0 < rho < 1:
        raise ValueError("rho must be in (0, 1)")
    n = len(scores)
    if n < 2:
        raise SingletonDataset("Need at least two structures to form positive pairs")
    row = np.asarray(scores[a], dtype=np.float64).copy()
    row[a] = -np.inf
    threshold = rho * row.max()
    return [int(b) for b in np.flatnonzero(row >= threshold)]


def positive_sets(matrix: SimilarityMatrix, rho: float, normalization: str = 'query') -> List[List[int]]:
    scores = matrix.normalized(normalization)
    return [positives(scores, a, rho) for a in range(len(matrix))]


def sample_batch(n: int, positive_set: Sequence[int], query: int, k: int,
                 rng: np.random.Generator) -> TrainingBatch:
    """
    One query, one uniformly drawn positive and k distinct negatives.

    Args:
        n: Dataset size
        positive_set: positives(query)
        query: Query index
        k: Number of negatives
        rng: Seeded generator owned by the caller

    Returns:
        TrainingBatch (window unset)
    """
    excluded = set(positive_set) | {query}
    complement = np.array([i for i in range(n) if i not in excluded], dtype=np.int64)
    if len(complement) < k:
        raise NotEnoughNegatives(f"Query {query} has {len(complement)} non-positives, need {k}")
    positive = int(positive_set[rng.integers(len(positive_set))])
    negatives = rng.choice(complement, size=k, replace=False)
    return TrainingBatch(query=query, positive=positive, negatives=[int(i) for i in negatives])


def _all_windows_pass(chain: ProteinChain, length: int, alpha: float) -> bool:
    return all(tm_fragment(chain, start, length).score >= alpha - TM_TOLERANCE
               for start in range(len(chain) - length + 1))


def precompute_min_length(chain: ProteinChain, alpha: float) -> int:
    """Smallest L in [3, |P|] for which every window of length L has TM >= alpha."""
    n = len(chain)
    lo, hi = MIN_CHAIN_LENGTH, n
    # The full chain always qualifies (score 1)
    while lo < hi:
        mid = (lo + hi) // 2
        if _all_windows_pass(chain, mid, alpha):
            hi = mid
        else:
            lo = mid + 1
    return hi


def build_plan(chains: Sequence[ProteinChain], alpha: float, threads: int = 1) -> SubstructurePlan:
    def work(chain):
        return chain.id, precompute_min_length(chain, alpha)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, chains))
    else:
        results = [work(c) for c in chains]
    logger.info(f"Computed minimum window lengths for {len(results)} structures (alpha={alpha})")
    return SubstructurePlan(alpha=alpha, min_length=dict(results))


def sample_substructure(chain: ProteinChain, min_length: int,
                        rng: np.random.Generator) -> Tuple[int, int]:
    """
    Random window grown from a random anchor.

    The length is uniform in [min_length, |P|]; the window extends one residue
    right, then one left, and so on, switching sides when one end is reached.

    Returns:
        (start, length)
    """
    n = len(chain)
    min_length = min(max(min_length, 1), n)
    anchor = int(rng.integers(n))
    length = int(rng.integers(min_length, n + 1))
    left = right = anchor           # inclusive bounds
    grow_right = True
    while right - left + 1 < length:
        if grow_right and right < n - 1:
            right += 1
        elif not grow_right and left > 0:
            left -= 1
        elif right < n - 1:
            right += 1
        else:
            left -= 1
        grow_right = not grow_right
    return left, length


def write_plan(path: str, plan: SubstructurePlan):
    with open(path, 'w', encoding='utf-8') as f:
        for structure_id, length in plan.min_length.items():
            f.write(f"{structure_id}\t{length}\n")


def read_plan(path: str, alpha: float = 0.9) -> SubstructurePlan:
    plan = SubstructurePlan(alpha=alpha)
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip('\n')
            if not line:
                continue
            parts = line.split('\t')
            if len(parts) != 2 or not parts[1].isdigit():
                raise MalformedRecord(f"Plan line {lineno}: expected 'id<TAB>min_length'")
            plan.min_length[parts[0]] = int(parts[1])
    return plan
