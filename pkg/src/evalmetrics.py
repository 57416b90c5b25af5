"""
Retrieval evaluation: similar-pair labels, AUROC, AUPRC and Top-k hit ratio.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set

import numpy as np

from src.encoder import HashCode
from src.errors import DegenerateLabels, EmptyDatabase, NoPositives, PoshError
from src.hash_index import CodeDatabase, search
from src.tmscore import SimilarityMatrix

logger = logging.getLogger(__name__)

SIMILAR_FRACTION = 0.9
REPORT_TOPK = (1, 5, 10)


def label_similar(matrix: SimilarityMatrix, query: str, db_ids: Sequence[str],
                  normalization: str = 'query', fraction: float = SIMILAR_FRACTION) -> Set[str]:
    """Database structures whose TM-score to the query is >= fraction * the best one."""
    candidates = [name for name in db_ids if name != query]
    if not candidates:
        raise EmptyDatabase("No database structures to label")
    row = matrix.normalized(normalization)[matrix.index(query)]
    values = np.array([row[matrix.index(name)] for name in candidates], dtype=np.float64)
    threshold = fraction * values.max()
    return {name for name, v in zip(candidates, values) if v >= threshold}


def auroc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """
    Probability that a random positive scores above a random negative.

    Higher scores rank first; tied pairs count 1/2 (Mann-Whitney U).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"AUROC needs both classes ({n_pos} positive, {n_neg} negative)")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    mid_rank = upper - (counts - 1) / 2.0
    ranks = mid_rank[inverse]
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Average precision over the ranking by descending score (ties keep input order)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if not labels.any():
        raise NoPositives("AUPRC needs at least one positive")
    order = np.argsort(-scores, kind='stable')
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    precision = np.arange(1, len(ranks) + 1) / ranks
    return float(precision.mean())


def hits_at_k(ranking: Sequence[str], similar: Set[str], k: int) -> float:
    """Found similar structures in the top k over min(k, |similar|)."""
    if not similar:
        raise NoPositives("Query has no similar structures")
    found = sum(1 for name in ranking[:k] if name in similar)
    return found / min(k, len(similar))


def topk_hit_ratio(rankings: Sequence[Sequence[str]], labels: Sequence[Set[str]], k: int) -> float:
    """Mean of hits_at_k over queries."""
    if not rankings:
        raise NoPositives("No queries to average")
    return float(np.mean([hits_at_k(r, s, k) for r, s in zip(rankings, labels)]))


@dataclass
class QueryEvaluation:
    query: str
    ranked_ids: List[str]
    scaled: List[float]
    similar: Set[str]
    auroc: float
    auprc: float
    hits: Dict[int, float] = field(default_factory=dict)


@dataclass
class EvaluationReport:
    queries: List[QueryEvaluation]
    skipped: int = 0

    def mean(self, metric: str) -> float:
        if not self.queries:
            return float('nan')
        if metric in ('auroc', 'auprc'):
            return float(np.mean([getattr(q, metric) for q in self.queries]))
        k = int(metric[len('top'):])
        return float(np.mean([q.hits[k] for q in self.queries]))

    def summary(self) -> Dict[str, float]:
        out = {'auroc': self.mean('auroc'), 'auprc': self.mean('auprc')}
        for k in REPORT_TOPK:
            out[f"top{k}"] = self.mean(f"top{k}")
        out['queries'] = len(self.queries)
        out['skipped'] = self.skipped
        return out


class RetrievalEvaluator:
    """Runs each query against the database and scores the ranking against TM-score labels."""

    def __init__(self, db: CodeDatabase, matrix: SimilarityMatrix, normalization: str = 'query',
                 scale_mode: str = 'divide', use_length_scaling: bool = True):
        if len(db) == 0:
            raise EmptyDatabase("Cannot evaluate against an empty database")
        self.db = db
        self.matrix = matrix
        self.normalization = normalization
        self.scale_mode = scale_mode
        self.use_length_scaling = use_length_scaling

    def evaluate_query(self, query: HashCode) -> QueryEvaluation:
        """
        Full ranking of the database for one query (the query itself excluded).

        Args:
            query: Query code; its id must be in the similarity matrix

        Returns:
            QueryEvaluation with AUROC, AUPRC and hits at 1/5/10
        """
        hits = search(self.db, query, len(self.db), self.scale_mode, self.use_length_scaling)
        hits = [h for h in hits if h.id != query.id]
        ranked = [h.id for h in hits]
        similar = label_similar(self.matrix, query.id, ranked, self.normalization)
        labels = [name in similar for name in ranked]
        scores = [-h.scaled for h in hits]
        return QueryEvaluation(
            query=query.id,
            ranked_ids=ranked,
            scaled=[h.scaled for h in hits],
            similar=similar,
            auroc=auroc(scores, labels),
            auprc=auprc(scores, labels),
            hits={k: hits_at_k(ranked, similar, k) for k in REPORT_TOPK},
        )

    def evaluate(self, queries: Sequence[HashCode], threads: int = 1) -> EvaluationReport:
        """
        Evaluate every query, skipping (and counting) those whose labels are degenerate.

        Args:
            queries: Query codes
            threads: Worker threads

        Returns:
            EvaluationReport with per-query rows in input order
        """
        def work(query):
            try:
                return self.evaluate_query(query)
            except PoshError as e:
                logger.warning(f"Skipping query {query.id}: {e}")
                return None

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(work, queries))
        else:
            results = [work(q) for q in queries]

        rows = [r for r in results if r is not None]
        report = EvaluationReport(queries=rows, skipped=len(results) - len(rows))
        logger.info(f"Evaluated {len(rows)} queries ({report.skipped} skipped)")
        return report


def format_report(report: EvaluationReport) -> str:
    """TSV with one row per query plus a MEAN summary row."""
    header = ['query', 'auroc', 'auprc'] + [f"top{k}" for k in REPORT_TOPK] + ['n_similar']
    lines = ['\t'.join(header)]
    for q in report.queries:
        values = [q.auroc, q.auprc] + [q.hits[k] for k in REPORT_TOPK]
        lines.append('\t'.join([q.query] + [f"{v:.4f}" for v in values] + [str(len(q.similar))]))
    summary = report.summary()
    values = [summary['auroc'], summary['auprc']] + [summary[f"top{k}"] for k in REPORT_TOPK]
    lines.append('\t'.join(['MEAN'] + [f"{v:.4f}" for v in values] + [f"skipped={report.skipped}"]))
    return '\n'.join(lines) + '\n'


def write_report(path: Optional[str], report: EvaluationReport) -> str:
    text = format_report(report)
    if path:
        with open(path, 'w', encoding='utf-8') as f:
            f.write(text)
    return text
