"""
Raw graph features for a protein chain.

Node features are sin/cos of three bond angles and three dihedrals per residue;
edges connect each residue to its k nearest neighbours; edge features are
RBF-expanded distances between the 25 backbone atom pairs of the two residues.
"""
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np

from src.binfmt import ByteReader
from src.config import CBETA_WEIGHTS
from src.errors import BadMagic, DegenerateGeometry, PoshError
from src.protein_io import ProteinChain, ensure_cbeta

logger = logging.getLogger(__name__)

NODE_DIM = 12
# Frozen in the graph file format: X over this order, then Y over this order
EDGE_ATOM_ORDER = ('c', 'ca', 'n', 'o', 'cb')
N_ATOM_PAIRS = len(EDGE_ATOM_ORDER) ** 2

GRAPH_MAGIC = b'POSHGRF1'


@dataclass(frozen=True)
class RbfBank:
    """Gaussian radial basis functions with linearly spaced centres."""
    centers: np.ndarray
    sigma: float

    @classmethod
    def linear(cls, n_rbf: int = 16, d_min: float = 0.0, d_max: float = 20.0) -> 'RbfBank':
        centers = np.linspace(d_min, d_max, n_rbf)
        return cls(centers=centers, sigma=float(centers[1] - centers[0]))

    @property
    def n_rbf(self) -> int:
        return len(self.centers)

    def __post_init__(self):
        if self.sigma <= 0 or np.any(np.diff(self.centers) <= 0):
            raise ValueError("RBF centres must increase strictly and sigma must be positive")


@dataclass
class ProteinGraph:
    id: str
    node_feats: np.ndarray   # (n, 12)
    edges: np.ndarray        # (m, 2) int64, rows (i, j)
    edge_feats: np.ndarray   # (m, 25 * n_rbf)
    n_residues: int
    k: int = 0
    bank: Optional[RbfBank] = None

    @property
    def n_edges(self) -> int:
        return len(self.edges)


def _angle(u: np.ndarray, v: np.ndarray) -> float:
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateGeometry("Zero-length bond vector")
    cos = np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0)
    return float(np.arccos(cos))


def bond_angles(chain: ProteinChain) -> np.ndarray:
    """
    Per-residue (α, β, γ) in radians; NaN marks an undefined angle.

    α_i is the N-Cα-C angle, β_i the C(i-1)-N-Cα angle and γ_i the Cα-C-N(i+1)
    angle.
    """
    res = chain.residues
    n = len(res)
    out = np.full((n, 3), np.nan)
    for i, r in enumerate(res):
        out[i, 0] = _angle(r.n - r.ca, r.c - r.ca)
        if i > 0:
            out[i, 1] = _angle(res[i - 1].c - r.n, r.ca - r.n)
        if i < n - 1:
            out[i, 2] = _angle(r.ca - r.c, res[i + 1].n - r.c)
    return out


def dihedral(p0: np.ndarray, p1: np.ndarray, p2: np.ndarray, p3: np.ndarray) -> float:
    """Signed torsion angle in (−π, π] via atan2."""
    b1 = p1 - p0
    b2 = p2 - p1
    b3 = p3 - p2
    n1 = np.cross(b1, b2)
    n2 = np.cross(b2, b3)
    if np.linalg.norm(n1) == 0 or np.linalg.norm(n2) == 0:
        raise DegenerateGeometry("Three consecutive atoms are collinear")
    y = np.linalg.norm(b2) * np.dot(b1, n2)
    x = np.dot(n1, n2)
    angle = float(np.arctan2(y, x))
    if angle <= -np.pi:
        angle += 2 * np.pi
    return angle


def dihedral_angles(chain: ProteinChain) -> np.ndarray:
    """Per-residue (φ, ψ, ω) in radians; NaN marks an undefined angle."""
    res = chain.residues
    n = len(res)
    out = np.full((n, 3), np.nan)
    for i, r in enumerate(res):
        if i > 0:
            prev = res[i - 1]
            out[i, 0] = dihedral(prev.c, r.n, r.ca, r.c)
            out[i, 2] = dihedral(prev.ca, prev.c, r.n, r.ca)
        if i < n - 1:
            out[i, 1] = dihedral(r.n, r.ca, r.c, res[i + 1].n)
    return out


def node_features(chain: ProteinChain) -> np.ndarray:
    """(n, 12) matrix of [sin, cos] pairs for α, β, γ, φ, ψ, ω; undefined -> (0, 0)."""
    bonds = bond_angles(chain)
    dihedrals = dihedral_angles(chain)
    angles = np.concatenate([bonds, dihedrals], axis=1)   # α β γ φ ψ ω
    defined = ~np.isnan(angles)
    safe = np.where(defined, angles, 0.0)
    feats = np.empty((len(chain), NODE_DIM))
    feats[:, 0::2] = np.where(defined, np.sin(safe), 0.0)
    feats[:, 1::2] = np.where(defined, np.cos(safe), 0.0)
    return feats


def knn_graph(chain: ProteinChain, k: int, metric: str = 'ca',
              node_feats: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Directed kNN edges as an (n·min(k, n−1), 2) array sorted by (i, rank).

    Args:
        chain: Input chain (length >= 2)
        k: Neighbours per node, clamped to n-1
        metric: 'ca' for Cα coordinates, 'node_features' for the angle features
        node_feats: Precomputed node features for the 'node_features' metric

    Returns:
        Edge array of (i, j) pairs; ties go to the smaller index
    """
    n = len(chain)
    if n < 2 or k < 1:
        raise ValueError("knn_graph needs at least 2 residues and k >= 1")
    if metric == 'ca':
        points = chain.ca_coords()
    elif metric == 'node_features':
        points = node_feats if node_feats is not None else node_features(chain)
    else:
        raise ValueError(f"Unknown kNN metric {metric!r}")

    k_eff = min(k, n - 1)
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    np.fill_diagonal(dist, np.inf)
    # Stable sort keeps column order (= residue index) among equal distances
    order = np.argsort(dist, axis=1, kind='stable')[:, :k_eff]
    src = np.repeat(np.arange(n), k_eff)
    return np.stack([src, order.reshape(-1)], axis=1).astype(np.int64)


def rbf_encode(distance, bank: RbfBank) -> np.ndarray:
    """
    exp(−(d − μ_k)² / 2σ²) for every centre; broadcasts over array input.

    Far tails are clamped to the smallest normal float so every entry stays in (0, 1].
    """
    d = np.asarray(distance, dtype=np.float64)[..., None]
    response = np.exp(-((d - bank.centers) ** 2) / (2.0 * bank.sigma ** 2))
    return np.maximum(response, np.finfo(np.float64).tiny)


def edge_features(chain: ProteinChain, edges: np.ndarray, bank: RbfBank) -> np.ndarray:
    """RBF-encoded distances between atoms of residue i (X) and residue j (Y)."""
    atoms = chain.atom_array(EDGE_ATOM_ORDER)         # (n, 5, 3)
    if len(edges) == 0:
        return np.zeros((0, N_ATOM_PAIRS * bank.n_rbf))
    x = atoms[edges[:, 0]]                             # (m, 5, 3)
    y = atoms[edges[:, 1]]
    diff = x[:, :, None, :] - y[:, None, :, :]         # (m, 5, 5, 3)
    dist = np.sqrt(np.sum(diff * diff, axis=-1)).reshape(len(edges), N_ATOM_PAIRS)
    return rbf_encode(dist, bank).reshape(len(edges), N_ATOM_PAIRS * bank.n_rbf)


def build_graph(chain: ProteinChain, k: int, bank: RbfBank, metric: str = 'ca',
                cbeta_weights: Sequence[float] = CBETA_WEIGHTS) -> ProteinGraph:
    """Featurize a chain into a ProteinGraph, placing virtual Cβ with `cbeta_weights`."""
    chain = ensure_cbeta(chain, cbeta_weights)
    feats = node_features(chain)
    edges = knn_graph(chain, k, metric=metric, node_feats=feats)
    return ProteinGraph(
        id=chain.id,
        node_feats=feats,
        edges=edges,
        edge_feats=edge_features(chain, edges, bank),
        n_residues=len(chain),
        k=k,
        bank=bank,
    )


def featurize_many(chains: Sequence[ProteinChain], k: int, bank: RbfBank,
                   metric: str = 'ca', threads: int = 1,
                   cbeta_weights: Sequence[float] = CBETA_WEIGHTS) -> List[ProteinGraph]:
    """
    Featurize chains in input order, skipping (and logging) failures.

    Args:
        chains: Chains to featurize
        k: Neighbour count
        bank: RBF bank
        metric: kNN metric
        threads: Worker threads
        cbeta_weights: Virtual Cβ weights (w_a, w_b, w_c)

    Returns:
        Graphs for every chain that featurized successfully
    """
    def work(chain):
        try:
            return build_graph(chain, k, bank, metric, cbeta_weights)
        except PoshError as e:
            logger.error(f"Skipping {chain.id}: {e}")
            return None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, chains))
    else:
        results = [work(c) for c in chains]
    graphs = [g for g in results if g is not None]
    logger.info(f"Featurized {len(graphs)}/{len(chains)} chains")
    return graphs


# Graph file: back-to-back records of
#   magic, u16 id length, UTF-8 id,
#   u32 n, m, d_v, d_e, k, n_rbf; f64 mu_min, mu_max, sigma;
#   f32 node features (n x d_v), u32 edges (m x 2), f32 edge features (m x d_e)

def serialize_graph(graph: ProteinGraph) -> bytes:
    bank = graph.bank or RbfBank.linear()
    name = graph.id.encode('utf-8')
    d_e = graph.edge_feats.shape[1]
    header = struct.pack('<6I3d', graph.n_residues, graph.n_edges, NODE_DIM, d_e,
                         graph.k, bank.n_rbf, float(bank.centers[0]),
                         float(bank.centers[-1]), bank.sigma)
    return b''.join([
        GRAPH_MAGIC, struct.pack('<H', len(name)), name, header,
        graph.node_feats.astype('<f4').tobytes(),
        graph.edges.astype('<u4').tobytes(),
        graph.edge_feats.astype('<f4').tobytes(),
    ])


def _read_graph(reader: ByteReader) -> ProteinGraph:
    if reader.take(len(GRAPH_MAGIC)) != GRAPH_MAGIC:
        raise BadMagic("Not a graph record (expected POSHGRF1)")
    (name_len,) = reader.unpack('<H')
    name = reader.take(name_len).decode('utf-8')
    n, m, d_v, d_e, k, n_rbf, mu_min, mu_max, sigma = reader.unpack('<6I3d')
    node = np.frombuffer(reader.take(n * d_v * 4), dtype='<f4').reshape(n, d_v)
    edges = np.frombuffer(reader.take(m * 2 * 4), dtype='<u4').reshape(m, 2)
    edge_feats = np.frombuffer(reader.take(m * d_e * 4), dtype='<f4').reshape(m, d_e)
    bank = RbfBank(centers=np.linspace(mu_min, mu_max, n_rbf), sigma=sigma)
    return ProteinGraph(id=name, node_feats=node.astype(np.float64),
                        edges=edges.astype(np.int64),
                        edge_feats=edge_feats.astype(np.float64),
                        n_residues=n, k=k, bank=bank)


def write_graphs(path: str, graphs: Iterable[ProteinGraph]) -> int:
    count = 0
    with open(path, 'wb') as f:
        for graph in graphs:
            f.write(serialize_graph(graph))
            count += 1
    return count


def read_graphs(path: str) -> List[ProteinGraph]:
    with open(path, 'rb') as f:
        reader = ByteReader(f.read())
    graphs = []
    while not reader.at_end:
        graphs.append(_read_graph(reader))
    return graphs
