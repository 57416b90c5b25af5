"""
Structure encoder: input projections, stacked node/edge update layers,
max pooling, linear head and sign binarization.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from src.config import RunConfig, parse_config_text
from src.errors import ShapeMismatch
from src.featurize import NODE_DIM, N_ATOM_PAIRS, ProteinGraph
from src.neural_core import (
    AdamState, BatchNorm, Checkpoint, Linear, MLP2, Tensor, concat_cols,
    default_dtype, gather_rows, max_pool_rows, mean_aggregate, slice_rows
)

logger = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    hidden_dim: int = 128
    n_layers: int = 6
    code_length: int = 400
    k: int = 30
    activation: str = 'relu'
    use_edge_update: bool = True
    node_dim: int = NODE_DIM
    edge_dim: int = N_ATOM_PAIRS * 16

    @classmethod
    def from_run_config(cls, config: RunConfig) -> 'EncoderConfig':
        return cls(hidden_dim=config.hidden_dim, n_layers=config.n_layers,
                   code_length=config.code_length, k=config.k_nn,
                   activation=config.activation, use_edge_update=config.use_edge_update,
                   edge_dim=N_ATOM_PAIRS * config.n_rbf)

    def validate(self) -> 'EncoderConfig':
        if self.hidden_dim <= 0 or self.n_layers < 1 or self.code_length < 1:
            raise ValueError("hidden_dim > 0, n_layers >= 1 and code_length >= 1 are required")
        return self


class EncoderLayer:
    """One round of node update (NodeMLP, MLP, batchnorm) and edge update (EdgeMLP, batchnorm)."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator, name: str):
        h = config.hidden_dim
        self.node_mlp = MLP2(3 * h, h, h, rng, f"{name}.node_mlp", config.activation)
        self.mlp = MLP2(h, h, h, rng, f"{name}.mlp", config.activation)
        self.node_bn = BatchNorm(h, f"{name}.node_bn")
        self.edge_mlp = None
        self.edge_bn = None
        if config.use_edge_update:
            self.edge_mlp = MLP2(3 * h, h, h, rng, f"{name}.edge_mlp", config.activation)
            self.edge_bn = BatchNorm(h, f"{name}.edge_bn")

    def parameters(self):
        yield from self.node_mlp.parameters()
        yield from self.mlp.parameters()
        yield from self.node_bn.parameters()
        if self.edge_mlp is not None:
            yield from self.edge_mlp.parameters()
            yield from self.edge_bn.parameters()

    def batchnorms(self) -> List[BatchNorm]:
        return [bn for bn in (self.node_bn, self.edge_bn) if bn is not None]


class EncoderParams:
    """All learnable tensors plus batchnorm running statistics."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        h = config.hidden_dim
        self.node_in = Linear(config.node_dim, h, rng, 'node_in')
        self.edge_in = Linear(config.edge_dim, h, rng, 'edge_in')
        self.layers = [EncoderLayer(config, rng, f"layers.{i}") for i in range(config.n_layers)]
        self.head = Linear(h, config.code_length, rng, 'head')

    def named(self) -> Dict[str, Tensor]:
        """Parameters by name, in a fixed order."""
        tensors = list(self.node_in.parameters()) + list(self.edge_in.parameters())
        for layer in self.layers:
            tensors.extend(layer.parameters())
        tensors.extend(self.head.parameters())
        return {t.name: t for t in tensors}

    def batchnorms(self) -> List[BatchNorm]:
        return [bn for layer in self.layers for bn in layer.batchnorms()]

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for bn in self.batchnorms():
            out.update(bn.buffers())
        return out

    @property
    def dtype(self):
        return self.node_in.W.data.dtype

    def to_dtype(self, dtype) -> 'EncoderParams':
        for t in self.named().values():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    def zero_grad(self):
        for t in self.named().values():
            t.grad = None

    def load_arrays(self, params: Dict[str, np.ndarray], buffers: Dict[str, np.ndarray]):
        named = self.named()
        missing = set(named) - set(params)
        if missing:
            raise ShapeMismatch(f"Checkpoint lacks parameters: {sorted(missing)[:3]}")
        for name, t in named.items():
            if params[name].shape != t.shape:
                raise ShapeMismatch(f"{name}: checkpoint {params[name].shape} vs model {t.shape}")
            t.data = params[name].astype(t.data.dtype)
        for bn in self.batchnorms():
            for name, values in bn.buffers().items():
                if name in buffers:
                    values[:] = buffers[name]


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """Uniform(±1/√fan_in) weights, zero biases, batchnorm γ=1, β=0."""
    return EncoderParams(config.validate(), np.random.default_rng(seed))


@dataclass
class StructureEmbedding:
    y: Tensor
    n_residues: int
    id: str = ''


@dataclass
class HashCode:
    """d-bit code packed little-endian: bit k lives in byte k // 8 at position k % 8."""
    bits: np.ndarray
    code_length: int
    n_residues: int
    id: str = ''

    def unpack(self) -> np.ndarray:
        return np.unpackbits(self.bits, count=self.code_length, bitorder='little').astype(bool)

    def popcount(self) -> int:
        return int(self.unpack().sum())

    def to_hex(self) -> str:
        return self.bits.tobytes().hex()

    @classmethod
    def from_hex(cls, text: str, code_length: int, n_residues: int, id: str = '') -> 'HashCode':
        return cls(np.frombuffer(bytes.fromhex(text), dtype=np.uint8).copy(),
                   code_length, n_residues, id)

    @classmethod
    def from_signs(cls, signs: np.ndarray, n_residues: int, id: str = '') -> 'HashCode':
        positive = np.asarray(signs) > 0
        return cls(np.packbits(positive, bitorder='little'), len(positive), n_residues, id)


def node_update(h: Tensor, e: Tensor, edges: np.ndarray, layer: EncoderLayer,
                mode: str = 'train') -> Tensor:
    """
    u_i = h_i + mean_{j in N(i)} NodeMLP(h_i || h_j || e_ij);  h~_i = BN(h_i + MLP(u_i)).

    N(i) are the out-neighbours of i in the edge list.
    """
    if e.shape[0] != len(edges) or e.shape[1] != h.shape[1]:
        raise ShapeMismatch(f"node_update: h {h.shape}, e {e.shape}, {len(edges)} edges")
    src, dst = edges[:, 0], edges[:, 1]
    messages = layer.node_mlp(concat_cols([gather_rows(h, src), gather_rows(h, dst), e]))
    u = h + mean_aggregate(messages, src, h.shape[0])
    return layer.node_bn(h + layer.mlp(u), mode)


def edge_update(h_new: Tensor, e: Tensor, edges: np.ndarray, layer: EncoderLayer,
                mode: str = 'train') -> Tensor:
    """e'_ij = BN(e_ij + EdgeMLP(h~_i || h~_j || e_ij))."""
    if e.shape[0] != len(edges) or e.shape[1] != h_new.shape[1]:
        raise ShapeMismatch(f"edge_update: h {h_new.shape}, e {e.shape}, {len(edges)} edges")
    src, dst = edges[:, 0], edges[:, 1]
    update = layer.edge_mlp(concat_cols([gather_rows(h_new, src), gather_rows(h_new, dst), e]))
    return layer.edge_bn(e + update, mode)


def encode_batch(graphs: Sequence[ProteinGraph], params: EncoderParams,
                 mode: str = 'train') -> List[StructureEmbedding]:
    """
    Encode several graphs jointly (batchnorm statistics span all of them in train mode).

    Args:
        graphs: Graphs to encode
        params: Encoder parameters
        mode: 'train' or 'infer'

    Returns:
        One embedding per graph, in input order
    """
    cfg = params.config
    dtype = params.dtype
    node_blocks, edge_blocks, edge_index, offsets = [], [], [], []
    offset = 0
    for g in graphs:
        if g.node_feats.shape[1] != cfg.node_dim or g.edge_feats.shape[1] != cfg.edge_dim:
            raise ShapeMismatch(f"Graph {g.id}: features {g.node_feats.shape[1]}/"
                                f"{g.edge_feats.shape[1]}, encoder expects "
                                f"{cfg.node_dim}/{cfg.edge_dim}")
        node_blocks.append(g.node_feats)
        edge_blocks.append(g.edge_feats)
        edge_index.append(g.edges + offset)
        offsets.append((offset, offset + g.n_residues))
        offset += g.n_residues

    x = Tensor(np.concatenate(node_blocks), dtype=dtype)
    edge_x = Tensor(np.concatenate(edge_blocks), dtype=dtype)
    edges = np.concatenate(edge_index).astype(np.int64)

    h = params.node_in(x)
    e = params.edge_in(edge_x)
    for layer in params.layers:
        h_new = node_update(h, e, edges, layer, mode)
        if layer.edge_mlp is not None:
            e = edge_update(h_new, e, edges, layer, mode)
        h = h_new

    embeddings = []
    for g, (start, stop) in zip(graphs, offsets):
        pooled = max_pool_rows(slice_rows(h, start, stop))
        embeddings.append(StructureEmbedding(params.head(pooled), g.n_residues, g.id))
    return embeddings


def encode(graph: ProteinGraph, params: EncoderParams, mode: str = 'infer') -> StructureEmbedding:
    return encode_batch([graph], params, mode)[0]


def binarize(emb: StructureEmbedding) -> HashCode:
    """bit_k = 1 iff y_k > 0 (sign(0) counts as −1)."""
    return HashCode.from_signs(emb.y.data, emb.n_residues, emb.id)


def encode_codes(graphs: Sequence[ProteinGraph], params: EncoderParams,
                 threads: int = 1) -> List[HashCode]:
    """Infer-mode hash codes, one structure at a time, in input order."""
    def work(graph):
        return binarize(encode(graph, params, 'infer'))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(work, graphs))
    return [work(g) for g in graphs]


def to_checkpoint(params: EncoderParams, config: RunConfig,
                  adam: Optional[AdamState] = None) -> Checkpoint:
    return Checkpoint(
        params={name: t.data for name, t in params.named().items()},
        buffers=params.buffers(),
        digest=config.digest(),
        metadata=config.to_text(),
        adam=adam,
    )


def from_checkpoint(checkpoint: Checkpoint):
    """Rebuild (params, run config) from a loaded checkpoint."""
    config = parse_config_text(checkpoint.metadata)
    params = EncoderParams(EncoderConfig.from_run_config(config), np.random.default_rng(0))
    params.to_dtype(default_dtype())
    params.load_arrays(checkpoint.params, checkpoint.buffers)
    if config.digest() != checkpoint.digest:
        logger.warning("Checkpoint config digest does not match its stored config")
    return params, config
