"""
Training losses: quantization loss, InfoNCE contrastive loss and their
weighted sum.
"""
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from src.config import RunConfig
from src.errors import EmptyInput, ShapeMismatch
from src.neural_core import (
    Tensor, dot, l2_normalize, logsumexp, pick, square, stack, total
)


@dataclass
class LossConfig:
    gamma: float = 0.2
    lam: float = 0.5
    tau: float = 0.07
    n_negatives: int = 62

    @classmethod
    def from_run_config(cls, config: RunConfig) -> 'LossConfig':
        return cls(gamma=config.gamma, lam=config.lam, tau=config.tau,
                   n_negatives=config.n_negatives)

    def __post_init__(self):
        if self.gamma < 0 or self.lam < 0 or self.tau <= 0 or self.n_negatives < 1:
            raise ValueError("LossConfig needs gamma >= 0, lam >= 0, tau > 0, n_negatives >= 1")


@dataclass
class BatchEmbeddings:
    y_q: Tensor
    y_p: Tensor
    y_f: List[Tensor] = field(default_factory=list)

    def all(self) -> List[Tensor]:
        return [self.y_q, self.y_p] + list(self.y_f)

    def __post_init__(self):
        dims = {t.shape for t in self.all()}
        if len(dims) != 1:
            raise ShapeMismatch(f"Batch embeddings differ in shape: {sorted(dims)}")


def sign_constant(y: Tensor) -> Tensor:
    """sign(y) as a gradient-free tensor; zero maps to −1."""
    return Tensor(np.where(y.data > 0, 1.0, -1.0), dtype=y.data.dtype)


def hash_loss(ys: Sequence[Tensor], gamma: float) -> Tensor:
    """Σ_t ‖y_t − sign(y_t)‖² + γ·Σ_t (Σ_k y_tk)²."""
    if not ys:
        raise EmptyInput("hash_loss needs at least one embedding")
    loss = None
    for y in ys:
        term = total(square(y - sign_constant(y))) + gamma * square(total(y))
        loss = term if loss is None else loss + term
    return loss


def infonce_loss(batch: BatchEmbeddings, tau: float) -> Tensor:
    """
    −log softmax of the positive logit among [positive, negatives...].

    Vectors are L2-normalized first, so the loss ignores their scale.
    """
    q = l2_normalize(batch.y_q)
    logits = [dot(q, l2_normalize(batch.y_p)) / tau]
    logits.extend(dot(q, l2_normalize(f)) / tau for f in batch.y_f)
    v = stack(logits)
    return logsumexp(v) - pick(v, 0)


def loss_components(batch: BatchEmbeddings, cfg: LossConfig) -> Tuple[Tensor, Tensor, Tensor]:
    """Returns (L, L_sim, L_hash) with L = L_sim + λ·L_hash."""
    l_sim = infonce_loss(batch, cfg.tau)
    l_hash = hash_loss(batch.all(), cfg.gamma)
    return l_sim + cfg.lam * l_hash, l_sim, l_hash


def total_loss(batch: BatchEmbeddings, cfg: LossConfig) -> Tensor:
    return loss_components(batch, cfg)[0]
