"""
Search time and storage measurements for binary codes against a float32
real-valued baseline.
"""
import logging
import time
from typing import Dict, List, Sequence

import numpy as np

from src.encoder import HashCode
from src.hash_index import CodeDatabase, code_bytes, search

logger = logging.getLogger(__name__)


def random_database(n: int, d: int, rng: np.random.Generator) -> CodeDatabase:
    codes = rng.integers(0, 256, size=(n, code_bytes(d)), dtype=np.uint8)
    lengths = rng.integers(50, 500, size=n)
    return CodeDatabase(d, [f"s{i:07d}" for i in range(n)], codes, lengths)


def random_query(d: int, rng: np.random.Generator) -> HashCode:
    return HashCode(rng.integers(0, 256, size=code_bytes(d), dtype=np.uint8), d,
                    int(rng.integers(50, 500)), 'query')


def time_search(sizes: Sequence[int], d: int = 400, repeats: int = 3, k: int = 10,
                threads: int = 1, seed: int = 0) -> List[Dict]:
    """
    Best-of-repeats wall time of one exhaustive top-k search per database size.

    Returns:
        Rows with n, seconds and seconds per entry
    """
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        db = random_database(n, d, rng)
        query = random_query(d, rng)
        best = float('inf')
        for _ in range(repeats):
            start = time.perf_counter()
            search(db, query, k, threads=threads)
            best = min(best, time.perf_counter() - start)
        rows.append({'method': 'hamming', 'n': n, 'seconds': best, 'per_entry': best / n})
        logger.info(f"Hamming search over {n} codes: {best:.4f}s")
    return rows


def time_real_valued(sizes: Sequence[int], d: int = 400, repeats: int = 3, k: int = 10,
                     seed: int = 0) -> List[Dict]:
    """Same measurement for a cosine-similarity scan over float32 vectors."""
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        vectors = rng.standard_normal((n, d), dtype=np.float32)
        vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
        query = rng.standard_normal(d, dtype=np.float32)
        query /= np.linalg.norm(query)
        best = float('inf')
        for _ in range(repeats):
            start = time.perf_counter()
            sims = vectors @ query
            top = np.argpartition(-sims, min(k, n) - 1)[:k]
            top = top[np.argsort(-sims[top], kind='stable')]
            best = min(best, time.perf_counter() - start)
        rows.append({'method': 'real', 'n': n, 'seconds': best, 'per_entry': best / n})
        logger.info(f"Float32 cosine scan over {n} vectors: {best:.4f}s")
    return rows


def memory_report(n: int, d: int = 400) -> Dict:
    """Bytes needed for n codes of d bits versus n float32 vectors of dimension d."""
    binary = n * code_bytes(d)
    real = n * d * 4
    return {'n': n, 'd': d, 'binary_bytes': binary, 'real_bytes': real,
            'ratio': real / binary if binary else float('nan')}


def format_rows(rows: List[Dict]) -> str:
    lines = ['method\tn\tseconds\tper_entry']
    for r in rows:
        lines.append(f"{r['method']}\t{r['n']}\t{r['seconds']:.6f}\t{r['per_entry']:.3e}")
    return '\n'.join(lines) + '\n'
