# core/pooling.py
"""
Depth-first clustering of element nodes and the pooled graph hierarchy used
by the GUnet stages.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
import scipy.sparse as sp

from utils.errors import StructuralError

from .meshgraph import adjacency_matrix
from .tensorcore import Tensor, as_tensor, gather, segment_mean

logger = logging.getLogger(__name__)


def dfs_cluster(
    adjacency: sp.spmatrix,
    pooling_ratio: int,
    material: Optional[np.ndarray] = None,
    keep_connected: bool = True,
) -> np.ndarray:
    """
    Assign every node a cluster id by walking same-material neighbors depth first.

    Start nodes are taken in ascending id order and neighbors are visited in
    ascending id order. A cluster is closed after ``pooling_ratio`` visits;
    a restart opens a fresh cluster unless the open one is still empty.

    Args:
        adjacency: Symmetric (n, n) adjacency
        pooling_ratio: Maximum cluster size, >= 1
        material: Per-node material index; walks never cross material changes
        keep_connected: Open a fresh cluster when the DFS backtracks past the
            open cluster, so every cluster induces a connected subgraph

    Returns:
        (n,) int64 cluster ids, contiguous from 0 in first-visit order
    """
    if pooling_ratio < 1:
        raise StructuralError(f"pooling ratio must be >= 1, got {pooling_ratio}")
    adj = sp.csr_matrix(adjacency)
    adj.sort_indices()
    n = adj.shape[0]
    if material is None:
        material = np.zeros(n, dtype=np.int64)
    indptr, indices = adj.indptr, adj.indices

    cluster = np.full(n, -1, dtype=np.int64)
    current, size = -1, 0
    for start in range(n):
        if cluster[start] >= 0:
            continue
        if current < 0 or size > 0:
            current, size = current + 1, 0
        stack: List[Tuple[int, int]] = [(start, -1)]
        while stack:
            node, parent = stack.pop()
            if cluster[node] >= 0:
                continue
            detached = keep_connected and size > 0 and cluster[parent] != current
            if size == pooling_ratio or detached:
                current, size = current + 1, 0
            cluster[node] = current
            size += 1
            row = indices[indptr[node]:indptr[node + 1]]
            for nb in row[::-1]:
                if cluster[nb] < 0 and material[nb] == material[node]:
                    stack.append((int(nb), node))
    return cluster


@dataclass(frozen=True)
class PooledTopology:
    """Directed pooled edges plus, for every original edge, the pooled edge it merged into."""
    num_nodes: int
    senders: np.ndarray
    receivers: np.ndarray
    edge_map: np.ndarray

    @property
    def num_edges(self) -> int:
        return len(self.senders)

    def provenance(self, edge: int) -> np.ndarray:
        """Original edge ids merged into pooled edge ``edge``."""
        return np.nonzero(self.edge_map == edge)[0]

    def undirected_edges(self) -> List[Tuple[int, int]]:
        return sorted({(min(a, b), max(a, b)) for a, b in zip(self.senders.tolist(), self.receivers.tolist())})

    def undirected_provenance(self, a: int, b: int) -> List[int]:
        """Original edges crossing between pooled nodes a and b, both directions."""
        hits = ((self.senders == a) & (self.receivers == b)) | ((self.senders == b) & (self.receivers == a))
        return sorted(np.nonzero(np.isin(self.edge_map, np.nonzero(hits)[0]))[0].tolist())


def build_pooled_graph(
    senders: np.ndarray,
    receivers: np.ndarray,
    cluster: np.ndarray,
    num_clusters: Optional[int] = None,
) -> PooledTopology:
    """
    Collapse clusters to single nodes; drop self-loops; merge parallel edges.

    Pooled edges are sorted by (sender, receiver).
    """
    cluster = np.asarray(cluster, dtype=np.int64)
    k = int(cluster.max()) + 1 if num_clusters is None else num_clusters
    senders = np.asarray(senders, dtype=np.int64)
    receivers = np.asarray(receivers, dtype=np.int64)
    if senders.size and (max(senders.max(), receivers.max()) >= len(cluster) or min(senders.min(), receivers.min()) < 0):
        raise StructuralError("edge references a node without a cluster id")
    cs, cr = cluster[senders], cluster[receivers]
    crossing = cs != cr
    edge_map = np.full(len(senders), -1, dtype=np.int64)
    if crossing.any():
        pairs, inverse = np.unique(np.stack([cs[crossing], cr[crossing]], axis=1), axis=0, return_inverse=True)
        edge_map[crossing] = inverse.reshape(-1)
    else:
        pairs = np.zeros((0, 2), dtype=np.int64)
    return PooledTopology(num_nodes=k, senders=pairs[:, 0], receivers=pairs[:, 1], edge_map=edge_map)


@dataclass(frozen=True)
class PoolingStage:
    ratio: int
    cluster: np.ndarray
    num_clusters: int
    topology: PooledTopology
    material: np.ndarray

    @property
    def num_fine_nodes(self) -> int:
        return len(self.cluster)

    def members(self, k: int) -> np.ndarray:
        return np.nonzero(self.cluster == k)[0]

    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.cluster, minlength=self.num_clusters)


@dataclass(frozen=True)
class PoolingPlan:
    """Per-stage clusterings over the mesh-only element adjacency."""
    num_nodes: int
    stages: Tuple[PoolingStage, ...]

    @property
    def ratios(self) -> Tuple[int, ...]:
        return tuple(stage.ratio for stage in self.stages)

    def __len__(self) -> int:
        return len(self.stages)


def build_pooling_plan(
    senders: np.ndarray,
    receivers: np.ndarray,
    num_nodes: int,
    material: np.ndarray,
    ratios: Sequence[int],
    keep_connected: bool = True,
) -> PoolingPlan:
    """
    Cluster once per stage; each stage clusters the previous pooled graph.

    Cluster materials propagate from their (uniform) members.
    """
    stages: List[PoolingStage] = []
    n = num_nodes
    material = np.asarray(material, dtype=np.int64)
    for i, ratio in enumerate(ratios):
        adj = adjacency_matrix(senders, receivers, n)
        cluster = dfs_cluster(adj, ratio, material, keep_connected=keep_connected)
        k = int(cluster.max()) + 1 if n else 0
        topology = build_pooled_graph(senders, receivers, cluster, k)
        pooled_material = np.zeros(k, dtype=np.int64)
        pooled_material[cluster] = material
        stages.append(PoolingStage(ratio, cluster, k, topology, pooled_material))
        logger.debug(f"stage {i}: {n} nodes -> {k} clusters (ratio {ratio}), {topology.num_edges} pooled edges")
        senders, receivers, n, material = topology.senders, topology.receivers, k, pooled_material
    return PoolingPlan(num_nodes=num_nodes, stages=tuple(stages))


def validate_plan(plan: PoolingPlan, senders: np.ndarray, receivers: np.ndarray, material: np.ndarray) -> None:
    """Raise StructuralError unless every stage has contiguous, bounded, pure, connected clusters."""
    material = np.asarray(material)
    n = plan.num_nodes
    for i, stage in enumerate(plan.stages):
        if stage.num_fine_nodes != n:
            raise StructuralError(f"stage {i} clusters {stage.num_fine_nodes} nodes, expected {n}")
        if n and (stage.cluster.min() < 0 or set(np.unique(stage.cluster)) != set(range(stage.num_clusters))):
            raise StructuralError(f"stage {i} cluster ids are not contiguous")
        sizes = stage.cluster_sizes()
        if (sizes < 1).any() or (sizes > stage.ratio).any():
            raise StructuralError(f"stage {i} has a cluster of size {sizes.max()} > {stage.ratio}")
        graph = nx.Graph()
        graph.add_nodes_from(range(n))
        graph.add_edges_from(
            (int(a), int(b)) for a, b in zip(senders, receivers) if material[a] == material[b]
        )
        for k in range(stage.num_clusters):
            members = stage.members(k)
            if np.unique(material[members]).size != 1:
                raise StructuralError(f"stage {i} cluster {k} mixes materials")
            if not nx.is_connected(graph.subgraph(members.tolist())):
                raise StructuralError(f"stage {i} cluster {k} is not connected")
        senders, receivers = stage.topology.senders, stage.topology.receivers
        material, n = stage.material, stage.num_clusters


def pool_features(
    nodes: Union[Tensor, np.ndarray],
    edges: Union[Tensor, np.ndarray],
    stage: PoolingStage,
    topology: Optional[PooledTopology] = None,
) -> Tuple[Tensor, Tensor]:
    """Mean of member node features and of merged edge features."""
    topology = topology or stage.topology
    nodes, edges = as_tensor(nodes), as_tensor(edges)
    pooled_nodes = segment_mean(nodes, stage.cluster, stage.num_clusters)
    kept = np.nonzero(topology.edge_map >= 0)[0]
    pooled_edges = segment_mean(gather(edges, kept), topology.edge_map[kept], topology.num_edges)
    return pooled_nodes, pooled_edges


def unpool_features(pooled: Union[Tensor, np.ndarray], stage: PoolingStage) -> Tensor:
    """Every fine node receives its cluster's pooled row."""
    return gather(as_tensor(pooled), stage.cluster)


def receptive_field(m_enc: int, m_gu: int, pooling_ratios: Sequence[int], m_proc: int = 0) -> int:
    """Largest hop distance that can influence a node's output."""
    if not pooling_ratios:
        return m_enc + m_proc
    return m_enc + (m_gu + 1) * (math.prod(pooling_ratios) + 1) - 2
