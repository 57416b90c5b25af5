"""
Pipeline orchestration: file-level steps from raw structures to evaluation.
"""
import glob
import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

from src.config import DEFAULT_THREADS, LOG_FILE, LOG_LEVEL, RunConfig
from src.encoder import HashCode, binarize, encode, encode_codes
from src.errors import EmptyInput, IndexOutOfRange, NoChainFound, PoshError
from src.evalmetrics import EvaluationReport, RetrievalEvaluator
from src.featurize import (
    ProteinGraph, RbfBank, build_graph, featurize_many, read_graphs, write_graphs
)
from src.fetcher import StructureFetcher
from src.hash_index import (
    CodeDatabase, SearchHit, load_index, read_codes, save_index, search, write_codes
)
from src.protein_io import ProteinChain, ensure_cbeta, parse_pdb, read_chains, write_chains
from src.sampling import SubstructurePlan, build_plan, write_plan
from src.synth import FamilySpec, SyntheticDataset, generate, write_dataset
from src.tmscore import SimilarityMatrix, load_similarity, score_all_pairs
from src.trainer import Trainer, TrainingHistory, load_model, save_model

logger = logging.getLogger(__name__)

STRUCTURE_SUFFIXES = ('.pdb', '.ent')
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(level: str = LOG_LEVEL, log_file: Optional[str] = LOG_FILE):
    """Configure root logging: standard error always, plus a log file when one is set."""
    handlers = [logging.StreamHandler()]
    if log_file:
        log_dir = os.path.dirname(log_file)
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


class PoshPipeline:
    """Main orchestrator for ingest, featurize, train, encode, index, search and evaluation."""

    def __init__(self, config: Optional[RunConfig] = None, threads: int = DEFAULT_THREADS):
        self.config = (config or RunConfig()).validate()
        self.threads = max(1, threads)

    @property
    def bank(self) -> RbfBank:
        return RbfBank.linear(self.config.n_rbf, self.config.rbf_min, self.config.rbf_max)

    def fetch(self, pdb_ids: Sequence[str], out_dir: str) -> Dict:
        return StructureFetcher().fetch_many(pdb_ids, out_dir)

    def ingest(self, pdb_dir: str, out_path: str, chain_id: Optional[str] = None
               ) -> Tuple[List[ProteinChain], Dict]:
        """
        Parse every structure file in a directory into one chain file.

        Args:
            pdb_dir: Directory of .pdb/.ent files (sorted by name)
            out_path: Chain file to write
            chain_id: Chain to select in each file (default: first)

        Returns:
            Parsed chains and a summary of processed/failed counts
        """
        paths = sorted(p for p in glob.glob(os.path.join(pdb_dir, '*'))
                       if p.lower().endswith(STRUCTURE_SUFFIXES))
        if not paths:
            raise NoChainFound(f"No .pdb or .ent files in {pdb_dir}")
        chains = []
        failed = 0
        for path in paths:
            structure_id = os.path.splitext(os.path.basename(path))[0]
            try:
                with open(path, 'rb') as f:
                    chain = parse_pdb(f.read(), chain_id, structure_id)
                chains.append(ensure_cbeta(chain, self.config.cbeta_weights))
            except (PoshError, OSError) as e:
                logger.error(f"Error ingesting {path}: {e}")
                failed += 1
        write_chains(out_path, chains)
        logger.info(f"Ingested {len(chains)}/{len(paths)} structures into {out_path}")
        return chains, {'files': len(paths), 'chains': len(chains), 'failed': failed}

    def featurize(self, chains_path: str, out_path: str) -> List[ProteinGraph]:
        chains = read_chains(chains_path)
        graphs = featurize_many(chains, self.config.k_nn, self.bank, self.config.knn_metric,
                                self.threads, self.config.cbeta_weights)
        write_graphs(out_path, graphs)
        return graphs

    def tmscore_pairs(self, chains_path: str,
                      pair_ids: Optional[Sequence[Tuple[str, str]]] = None) -> List[Tuple]:
        chains = read_chains(chains_path)
        pairs = None
        if pair_ids is not None:
            rank = {c.id: i for i, c in enumerate(chains)}
            unknown = [name for pair in pair_ids for name in pair if name not in rank]
            if unknown:
                raise IndexOutOfRange(f"Pairs name structures not in {chains_path}: {unknown[:3]}")
            pairs = [(rank[a], rank[b]) for a, b in pair_ids]
        return score_all_pairs(chains, pairs, self.threads)

    def fragment_plan(self, chains_path: str, out_path: Optional[str] = None) -> SubstructurePlan:
        plan = build_plan(read_chains(chains_path), self.config.alpha, self.threads)
        if out_path:
            write_plan(out_path, plan)
        return plan

    def train(self, graphs_path: str, matrix_path: str, out_path: str,
              chains_path: Optional[str] = None, metrics_path: Optional[str] = None,
              progress: bool = True) -> TrainingHistory:
        """
        Train an encoder and write its checkpoint.

        Args:
            graphs_path: Graph file of the training structures
            matrix_path: Similarity TSV or binary cache covering them
            out_path: Checkpoint to write
            chains_path: Chain file enabling substructure sampling of positives
            metrics_path: Loss log TSV
            progress: Show a progress bar

        Returns:
            TrainingHistory
        """
        graphs = read_graphs(graphs_path)
        matrix = load_similarity(matrix_path)
        chains = read_chains(chains_path) if chains_path else None
        trainer = Trainer(self.config, graphs, matrix, chains=chains, metrics_path=metrics_path,
                          threads=self.threads)
        history = trainer.train(progress=progress)
        save_model(out_path, trainer.params, self.config, trainer.adam)
        return history

    def encode(self, checkpoint_path: str, graphs_path: str, out_path: str) -> List[HashCode]:
        params, _ = load_model(checkpoint_path)
        codes = encode_codes(read_graphs(graphs_path), params, self.threads)
        write_codes(out_path, codes)
        logger.info(f"Wrote {len(codes)} codes to {out_path}")
        return codes

    def build_index(self, codes_path: str, out_path: str) -> CodeDatabase:
        codes = read_codes(codes_path)
        if not codes:
            raise EmptyInput(f"No codes in {codes_path}")
        db = CodeDatabase.from_codes(codes)
        save_index(out_path, db)
        return db

    def structure_code(self, checkpoint_path: str, pdb_path: str) -> HashCode:
        """Encode a raw structure with the featurization settings stored in the checkpoint."""
        params, run_config = load_model(checkpoint_path)
        with open(pdb_path, 'rb') as f:
            structure_id = os.path.splitext(os.path.basename(pdb_path))[0]
            chain = parse_pdb(f.read(), structure_id=structure_id)
        bank = RbfBank.linear(run_config.n_rbf, run_config.rbf_min, run_config.rbf_max)
        graph = build_graph(chain, run_config.k_nn, bank, run_config.knn_metric,
                            run_config.cbeta_weights)
        return binarize(encode(graph, params, 'infer'))

    def search(self, index_path: str, queries: Sequence[HashCode], k: int
               ) -> List[Tuple[HashCode, List[SearchHit]]]:
        db = load_index(index_path)
        return [(q, search(db, q, k, self.config.scale_mode, self.config.use_length_scaling,
                           self.threads))
                for q in queries]

    def evaluate(self, index_path: str, codes_path: str, matrix_path: str) -> EvaluationReport:
        db = load_index(index_path)
        matrix: SimilarityMatrix = load_similarity(matrix_path)
        evaluator = RetrievalEvaluator(db, matrix, self.config.tm_normalization,
                                       self.config.scale_mode, self.config.use_length_scaling)
        return evaluator.evaluate(read_codes(codes_path), self.threads)

    def synth(self, spec: FamilySpec, out_dir: str) -> SyntheticDataset:
        """Generate a synthetic dataset: PDB files, similarity.tsv and chains.bin."""
        logger.info(f"Synthesizing dataset with seed={spec.seed}")
        dataset = generate(spec)
        write_dataset(dataset, out_dir)
        write_chains(os.path.join(out_dir, 'chains.bin'), dataset.chains)
        return dataset
