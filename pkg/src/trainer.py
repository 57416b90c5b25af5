"""
Training loop: batch sampling, joint train-mode encoding, loss, gradient
accumulation and Adam updates.
"""
import logging
import math
import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from src.config import RunConfig
from src.encoder import (
    EncoderConfig, EncoderParams, encode_batch, from_checkpoint, init_params, to_checkpoint
)
from src.errors import NotEnoughNegatives, ShapeMismatch
from src.featurize import ProteinGraph, RbfBank, build_graph
from src.neural_core import (
    AdamState, ComputationTape, GradientAccumulator, adam_step, backward,
    load_checkpoint, save_checkpoint
)
from src.objective import BatchEmbeddings, LossConfig, loss_components
from src.protein_io import ProteinChain
from src.sampling import (
    SubstructurePlan, TrainingBatch, build_plan, positive_sets, sample_batch,
    sample_substructure
)
from src.tmscore import SimilarityMatrix

logger = logging.getLogger(__name__)

METRICS_HEADER = 'step\tl_sim\tl_hash\tloss\n'


@dataclass
class TrainingHistory:
    rows: List[Tuple[int, float, float, float]] = field(default_factory=list)

    def last(self) -> Optional[Tuple[int, float, float, float]]:
        return self.rows[-1] if self.rows else None


class Trainer:
    """Owns the sampling state, parameters and optimizer of one training run."""

    def __init__(self, config: RunConfig, graphs: Sequence[ProteinGraph],
                 matrix: SimilarityMatrix, chains: Optional[Sequence[ProteinChain]] = None,
                 plan: Optional[SubstructurePlan] = None, params: Optional[EncoderParams] = None,
                 metrics_path: Optional[str] = None, threads: int = 1):
        self.config = config.validate()
        self.graphs = list(graphs)
        self.matrix = matrix.subset([g.id for g in self.graphs])
        self.positives = positive_sets(self.matrix, config.rho, config.tm_normalization)
        self.loss_config = LossConfig.from_run_config(config)
        self.rng = np.random.default_rng(config.seed)
        self.metrics_path = metrics_path

        enc_config = EncoderConfig.from_run_config(config)
        edge_dim = self.graphs[0].edge_feats.shape[1] if self.graphs else enc_config.edge_dim
        if edge_dim != enc_config.edge_dim:
            raise ShapeMismatch(f"Graphs carry {edge_dim} edge features, config implies "
                                f"{enc_config.edge_dim} (n_rbf={config.n_rbf})")
        self.params = params or init_params(enc_config, config.seed)
        self.adam = AdamState(lr=config.lr)
        self.accumulator = GradientAccumulator(config.accumulation)

        self.chains: Dict[str, ProteinChain] = {}
        self.plan = plan
        if config.use_substructure_sampling and chains:
            self.chains = {c.id: c for c in chains}
            if self.plan is None:
                wanted = [self.chains[g.id] for g in self.graphs if g.id in self.chains]
                self.plan = build_plan(wanted, config.alpha, threads)
        self.bank = RbfBank.linear(config.n_rbf, config.rbf_min, config.rbf_max)

    def total_steps(self) -> int:
        """Optimizer steps for the run: max_steps, or one pass per epoch over all queries."""
        if self.config.max_steps is not None:
            return self.config.max_steps
        return self.config.epochs * math.ceil(len(self.graphs) / self.config.accumulation)

    def _positive_graph(self, batch: TrainingBatch) -> ProteinGraph:
        graph = self.graphs[batch.positive]
        chain = self.chains.get(graph.id)
        if chain is None or self.plan is None or graph.id not in self.plan:
            return graph
        start, length = sample_substructure(chain, self.plan[graph.id], self.rng)
        batch.window = (start, length)
        if length == len(chain):
            return graph
        window = chain.window(start, length, f"{graph.id}[{start}:{start + length}]")
        return build_graph(window, self.config.k_nn, self.bank, self.config.knn_metric,
                           self.config.cbeta_weights)

    def micro_batch(self, query: int) -> Tuple[Dict[str, np.ndarray], Tuple[float, float, float]]:
        """
        Sample, encode jointly in train mode and differentiate one micro-batch.

        Returns:
            (named gradients, (L, L_sim, L_hash))
        """
        n = len(self.graphs)
        batch = sample_batch(n, self.positives[query], query, self.config.n_negatives, self.rng)
        members = ([self.graphs[query], self._positive_graph(batch)]
                   + [self.graphs[i] for i in batch.negatives])
        with ComputationTape() as tape:
            embs = encode_batch(members, self.params, 'train')
            loss, l_sim, l_hash = loss_components(
                BatchEmbeddings(embs[0].y, embs[1].y, [e.y for e in embs[2:]]), self.loss_config)
        grads = backward(tape, loss)
        self.params.zero_grad()
        return grads, (loss.item(), l_sim.item(), l_hash.item())

    def _append_metrics(self, row: Tuple[int, float, float, float]):
        if not self.metrics_path:
            return
        with open(self.metrics_path, 'a', encoding='utf-8') as f:
            f.write(f"{row[0]}\t{row[1]:.6f}\t{row[2]:.6f}\t{row[3]:.6f}\n")

    def train(self, progress: bool = True) -> TrainingHistory:
        """
        Run until the configured number of optimizer steps is reached.

        Args:
            progress: Show a progress bar on standard error

        Returns:
            TrainingHistory of (step, L_sim, L_hash, L) averaged per optimizer step
        """
        history = TrainingHistory()
        total = self.total_steps()
        logger.info(f"Training on {len(self.graphs)} structures for {total} steps, "
                    f"seed={self.config.seed}")
        logger.info(f"Effective config: {self.config.as_dict()}")
        if self.metrics_path:
            with open(self.metrics_path, 'w', encoding='utf-8') as f:
                f.write(METRICS_HEADER)

        step = 0
        window = []
        bar = tqdm(total=total, desc='train', file=sys.stderr, disable=not progress)
        while step < total:
            used = 0
            for query in self.rng.permutation(len(self.graphs)):
                try:
                    grads, losses = self.micro_batch(int(query))
                except NotEnoughNegatives as e:
                    logger.warning(f"Skipping query {self.graphs[query].id}: {e}")
                    continue
                used += 1
                window.append(losses)
                averaged = self.accumulator.add(grads)
                if averaged is None:
                    continue

                adam_step(self.params.named(), averaged, self.adam)
                step += 1
                loss, l_sim, l_hash = np.mean(window, axis=0)
                window = []
                row = (step, float(l_sim), float(l_hash), float(loss))
                history.rows.append(row)
                self._append_metrics(row)
                bar.update(1)
                bar.set_postfix(loss=f"{loss:.4f}")
                if step % self.config.log_every == 0 or step == total:
                    logger.info(f"step {step}: L_sim={l_sim:.4f} L_hash={l_hash:.4f} L={loss:.4f}")
                if step >= total:
                    break
            if used == 0:
                bar.close()
                raise NotEnoughNegatives(
                    f"No query has {self.config.n_negatives} negatives; lower n_negatives")
        bar.close()
        return history


def train(graphs: Sequence[ProteinGraph], matrix: SimilarityMatrix, config: RunConfig,
          chains: Optional[Sequence[ProteinChain]] = None, metrics_path: Optional[str] = None,
          progress: bool = True, threads: int = 1) -> Tuple[EncoderParams, TrainingHistory]:
    trainer = Trainer(config, graphs, matrix, chains=chains, metrics_path=metrics_path,
                      threads=threads)
    history = trainer.train(progress=progress)
    return trainer.params, history


def save_model(path: str, params: EncoderParams, config: RunConfig,
               adam: Optional[AdamState] = None):
    save_checkpoint(path, to_checkpoint(params, config, adam))


def load_model(path: str) -> Tuple[EncoderParams, RunConfig]:
    return from_checkpoint(load_checkpoint(path))
