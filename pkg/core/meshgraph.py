# core/meshgraph.py
"""Mesh time steps, their heterogeneous graph view, and trajectory files."""

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from utils.constants import DEGENERATE_VOLUME_TOL, TRAJECTORY_MAGIC, TRAJECTORY_VERSION
from utils.errors import CheckpointFormatError, MeshValidationError
from utils.utils import canonical_json

from .tensorcore import get_default_dtype

logger = logging.getLogger(__name__)


@dataclass
class MeshState:
    """One time step of one or more discretized bodies."""
    dim: int
    positions: np.ndarray
    rest_positions: np.ndarray
    elements: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    boundary_flag: np.ndarray
    node_body: np.ndarray
    element_body: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.positions.shape[0]

    @property
    def num_elements(self) -> int:
        return self.elements.shape[0]

    def with_positions(self, positions: np.ndarray, boundary_flag: Optional[np.ndarray] = None) -> "MeshState":
        flags = self.boundary_flag if boundary_flag is None else boundary_flag
        return replace(self, positions=positions, boundary_flag=flags)

    def validate(self) -> None:
        """Raise MeshValidationError if any MeshState invariant is broken."""
        if self.dim not in (2, 3):
            raise MeshValidationError(f"dim must be 2 or 3, got {self.dim}")
        n = self.num_nodes
        if self.positions.ndim != 2 or self.positions.shape[1] != self.dim:
            raise MeshValidationError(f"positions must be (n, {self.dim}), got {self.positions.shape}")
        if self.rest_positions.shape != self.positions.shape:
            raise MeshValidationError(
                f"rest_positions {self.rest_positions.shape} differ from positions {self.positions.shape}"
            )
        ne = self.num_elements
        if self.elements.ndim != 2 or self.elements.shape[1] != self.dim + 1:
            raise MeshValidationError(f"elements must be (m, {self.dim + 1}), got {self.elements.shape}")
        if ne and (self.elements.min() < 0 or self.elements.max() >= n):
            bad = int(np.nonzero((self.elements < 0) | (self.elements >= n))[0][0])
            raise MeshValidationError(f"element {bad} references a vertex outside 0..{n - 1}")
        for label, arr, size in (
            ("lam", self.lam, ne), ("mu", self.mu, ne), ("element_body", self.element_body, ne),
            ("boundary_flag", self.boundary_flag, n), ("node_body", self.node_body, n),
        ):
            if arr.shape != (size,):
                raise MeshValidationError(f"{label} must have shape ({size},), got {arr.shape}")
        unknown = (self.lam == 0) & (self.mu == 0)
        bad_material = ~unknown & ((self.lam < 0) | (self.mu <= 0))
        if bad_material.any():
            bad = int(np.nonzero(bad_material)[0][0])
            raise MeshValidationError(
                f"element {bad} has lambda={self.lam[bad]}, mu={self.mu[bad]}; need lambda >= 0, mu > 0"
            )
        if not np.isin(self.boundary_flag, (0, 1)).all():
            raise MeshValidationError("boundary_flag entries must be 0 or 1")
        if not np.isfinite(self.positions).all():
            raise MeshValidationError("positions contain non-finite values")


def centroids(points: np.ndarray, elements: np.ndarray) -> np.ndarray:
    """Arithmetic mean of each element's vertices."""
    return points[elements].mean(axis=1)


def signed_volumes(points: np.ndarray, elements: np.ndarray) -> np.ndarray:
    """Signed area (2D) or volume (3D) of every simplex."""
    corners = points[elements].astype(np.float64)
    spans = corners[:, 1:, :] - corners[:, :1, :]
    dim = points.shape[1]
    return np.linalg.det(spans) / (2.0 if dim == 2 else 6.0)


def check_elements(points: np.ndarray, elements: np.ndarray, label: str = "") -> None:
    """Reject zero-measure elements, naming the first offender."""
    vols = signed_volumes(points, elements)
    degenerate = np.abs(vols) <= DEGENERATE_VOLUME_TOL
    if degenerate.any():
        bad = int(np.nonzero(degenerate)[0][0])
        where = f" in {label}" if label else ""
        raise MeshValidationError(
            f"degenerate element {bad}{where}: vertices {elements[bad].tolist()} have measure {vols[bad]:.3e}"
        )


# ===== Section: static topology =====

@dataclass(frozen=True)
class MeshTopology:
    """Edges and materials that stay fixed over a trajectory."""
    num_nodes: int
    num_elements: int
    mm_senders: np.ndarray
    mm_receivers: np.ndarray
    ee_senders: np.ndarray
    ee_receivers: np.ndarray
    em_senders: np.ndarray
    em_receivers: np.ndarray
    material: np.ndarray

    def element_adjacency(self) -> sp.csr_matrix:
        return adjacency_matrix(self.ee_senders, self.ee_receivers, self.num_elements)


def adjacency_matrix(senders: np.ndarray, receivers: np.ndarray, num_nodes: int) -> sp.csr_matrix:
    """Binary CSR adjacency with sorted column indices."""
    data = np.ones(len(senders), dtype=np.int8)
    adj = sp.csr_matrix((data, (senders, receivers)), shape=(num_nodes, num_nodes))
    adj.data[:] = 1
    adj.sort_indices()
    return adj


def _bidirectional(pairs: np.ndarray) -> np.ndarray:
    if pairs.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    both = np.concatenate([pairs, pairs[:, ::-1]], axis=0)
    return np.unique(both, axis=0)


def _vertex_pairs(elements: np.ndarray) -> np.ndarray:
    k = elements.shape[1]
    pairs = [elements[:, [a, b]] for a, b in combinations(range(k), 2)]
    return np.sort(np.concatenate(pairs, axis=0), axis=1)


def _shared_facet_pairs(elements: np.ndarray, dim: int) -> np.ndarray:
    """Pairs of elements sharing an edge (dim=2) or a face (dim=3)."""
    ne, k = elements.shape
    if ne < 2:
        return np.zeros((0, 2), dtype=np.int64)
    facet_ids = list(combinations(range(k), dim))
    facets = np.sort(np.concatenate([elements[:, list(f)] for f in facet_ids], axis=0), axis=1)
    owners = np.tile(np.arange(ne), len(facet_ids))
    _, inverse = np.unique(facets, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    sorted_ids = inverse[order]
    breaks = np.nonzero(np.diff(sorted_ids))[0] + 1
    pairs: List[tuple] = []
    for run in np.split(order, breaks):
        if len(run) > 1:
            pairs.extend(combinations(sorted(owners[run].tolist()), 2))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    return np.asarray(pairs, dtype=np.int64)


def material_index(lam: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Dense material ids, one per distinct (lambda, mu) pair."""
    if lam.size == 0:
        return np.zeros(0, dtype=np.int64)
    _, inverse = np.unique(np.stack([lam, mu], axis=1), axis=0, return_inverse=True)
    return inverse.reshape(-1).astype(np.int64)


def build_topology(state: MeshState) -> MeshTopology:
    """Mesh edges, element adjacency and element-vertex incidence of a state."""
    elements = state.elements.astype(np.int64)
    mm = _bidirectional(_vertex_pairs(elements)) if len(elements) else np.zeros((0, 2), np.int64)
    ee = _bidirectional(_shared_facet_pairs(elements, state.dim))
    k = elements.shape[1]
    em_senders = np.repeat(np.arange(len(elements)), k)
    em_receivers = elements.reshape(-1)
    return MeshTopology(
        num_nodes=state.num_nodes,
        num_elements=state.num_elements,
        mm_senders=mm[:, 0], mm_receivers=mm[:, 1],
        ee_senders=ee[:, 0], ee_receivers=ee[:, 1],
        em_senders=em_senders, em_receivers=em_receivers,
        material=material_index(state.lam, state.mu),
    )


# ===== Section: heterogeneous graph =====

@dataclass
class EdgeSet:
    senders: np.ndarray
    receivers: np.ndarray
    features: np.ndarray

    def __len__(self) -> int:
        return len(self.senders)


@dataclass
class HeteroGraph:
    """Mesh nodes V^M, element nodes V^E and the four edge families."""
    dim: int
    xm: np.ndarray
    xe: np.ndarray
    edges: Dict[str, EdgeSet]
    num_world_edges: int
    material: np.ndarray
    topology: MeshTopology
    boundary_flag: np.ndarray
    element_body: np.ndarray = field(default=None)

    @property
    def num_mesh_nodes(self) -> int:
        return self.xm.shape[0]

    @property
    def num_element_nodes(self) -> int:
        return self.xe.shape[0]

    def element_adjacency(self) -> sp.csr_matrix:
        """Face/edge-sharing adjacency without world edges (clustering input)."""
        return self.topology.element_adjacency()


def edge_features(
    src_now: np.ndarray, tgt_now: np.ndarray,
    src_rest: np.ndarray, tgt_rest: np.ndarray,
    senders: np.ndarray, receivers: np.ndarray,
) -> np.ndarray:
    """x_ij^0 | |x_ij^0| | x_ij^t | |x_ij^t| with x_ij = x_sender - x_receiver."""
    rest = src_rest[senders] - tgt_rest[receivers]
    now = src_now[senders] - tgt_now[receivers]
    return np.concatenate(
        [rest, np.linalg.norm(rest, axis=1, keepdims=True),
         now, np.linalg.norm(now, axis=1, keepdims=True)],
        axis=1,
    )


def world_edges(centers: np.ndarray, body: np.ndarray, radius: float) -> np.ndarray:
    """Directed element pairs of different bodies closer than ``radius``."""
    if radius <= 0 or len(centers) < 2 or np.unique(body).size < 2:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = cKDTree(centers).query_pairs(radius, output_type="ndarray")
    if len(pairs) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    dist = np.linalg.norm(centers[pairs[:, 0]] - centers[pairs[:, 1]], axis=1)
    keep = (dist < radius) & (body[pairs[:, 0]] != body[pairs[:, 1]])
    return _bidirectional(pairs[keep].astype(np.int64))


def build_hetero_graph(
    state: MeshState,
    world_radius: float,
    topology: Optional[MeshTopology] = None,
) -> HeteroGraph:
    """
    Build the heterogeneous graph of one time step.

    Args:
        state: Mesh time step
        world_radius: Centroid distance below which elements of different
            bodies are linked (0 disables world edges)
        topology: Precomputed static topology (rebuilt when omitted)

    Returns:
        HeteroGraph with fully populated feature matrices
    """
    if world_radius < 0:
        raise MeshValidationError(f"world_radius must be >= 0, got {world_radius}")
    state.validate()
    check_elements(state.rest_positions, state.elements, "rest configuration")
    check_elements(state.positions, state.elements, "current configuration")
    if topology is None:
        topology = build_topology(state)
    dtype = get_default_dtype()

    x_now = state.positions.astype(np.float64)
    x_rest = state.rest_positions.astype(np.float64)
    c_now = centroids(x_now, state.elements)
    c_rest = centroids(x_rest, state.elements)

    xm = np.concatenate([state.boundary_flag[:, None].astype(np.float64), x_now - x_rest], axis=1)
    xe = np.concatenate([state.lam[:, None], state.mu[:, None], c_now - c_rest], axis=1)

    world = world_edges(c_now, state.element_body, world_radius)
    ee_s = np.concatenate([topology.ee_senders, world[:, 0]])
    ee_r = np.concatenate([topology.ee_receivers, world[:, 1]])

    edges = {
        "mm": EdgeSet(
            topology.mm_senders, topology.mm_receivers,
            edge_features(x_now, x_now, x_rest, x_rest, topology.mm_senders, topology.mm_receivers),
        ),
        "ee": EdgeSet(ee_s, ee_r, edge_features(c_now, c_now, c_rest, c_rest, ee_s, ee_r)),
        "em": EdgeSet(
            topology.em_senders, topology.em_receivers,
            edge_features(c_now, x_now, c_rest, x_rest, topology.em_senders, topology.em_receivers),
        ),
        "me": EdgeSet(
            topology.em_receivers, topology.em_senders,
            edge_features(x_now, c_now, x_rest, c_rest, topology.em_receivers, topology.em_senders),
        ),
    }
    for edge_set in edges.values():
        edge_set.features = edge_set.features.astype(dtype)

    return HeteroGraph(
        dim=state.dim,
        xm=xm.astype(dtype),
        xe=xe.astype(dtype),
        edges=edges,
        num_world_edges=len(world),
        material=topology.material,
        topology=topology,
        boundary_flag=state.boundary_flag,
        element_body=state.element_body,
    )


# ===== Section: trajectories =====

@dataclass
class Trajectory:
    """Ordered MeshStates sharing one topology; frame 0 is the rest state."""
    dim: int
    elements: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    node_body: np.ndarray
    element_body: np.ndarray
    positions: np.ndarray
    boundary_flags: np.ndarray
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.positions.shape[1]

    def state(self, t: int) -> MeshState:
        return MeshState(
            dim=self.dim,
            positions=self.positions[t],
            rest_positions=self.positions[0],
            elements=self.elements,
            lam=self.lam,
            mu=self.mu,
            boundary_flag=self.boundary_flags[t],
            node_body=self.node_body,
            element_body=self.element_body,
        )

    def states(self) -> List[MeshState]:
        return [self.state(t) for t in range(len(self))]

    @classmethod
    def from_states(cls, states: Sequence[MeshState], metadata: Optional[Dict[str, Any]] = None) -> "Trajectory":
        if not states:
            raise MeshValidationError("a trajectory needs at least one state")
        first = states[0]
        for t, s in enumerate(states):
            if s.elements.shape != first.elements.shape or not np.array_equal(s.elements, first.elements):
                raise MeshValidationError(f"state {t} does not share the trajectory topology")
        return cls(
            dim=first.dim,
            elements=first.elements.astype(np.int64),
            lam=first.lam.astype(np.float64),
            mu=first.mu.astype(np.float64),
            node_body=first.node_body.astype(np.int64),
            element_body=first.element_body.astype(np.int64),
            positions=np.stack([s.positions for s in states]).astype(np.float32),
            boundary_flags=np.stack([s.boundary_flag for s in states]).astype(np.int8),
            metadata=dict(metadata or {}),
        )


def save_trajectory(path: Union[str, Path], trajectory: Trajectory) -> None:
    """Write magic, version, length-prefixed JSON header, then float32 frames."""
    header = {
        "dim": trajectory.dim,
        "num_nodes": trajectory.num_nodes,
        "num_steps": len(trajectory),
        "elements": trajectory.elements.tolist(),
        "lam": trajectory.lam.tolist(),
        "mu": trajectory.mu.tolist(),
        "node_body": trajectory.node_body.tolist(),
        "element_body": trajectory.element_body.tolist(),
        "boundary_flags": trajectory.boundary_flags.tolist(),
        "metadata": trajectory.metadata,
    }
    blob = canonical_json(header)
    frames = np.ascontiguousarray(trajectory.positions, dtype="<f4")
    with open(path, "wb") as f:
        f.write(TRAJECTORY_MAGIC)
        f.write(struct.pack("<IQ", TRAJECTORY_VERSION, len(blob)))
        f.write(blob)
        f.write(frames.tobytes(order="C"))
    logger.debug(f"Wrote trajectory {path} ({len(trajectory)} steps, {trajectory.num_nodes} vertices)")


def load_trajectory(path: Union[str, Path]) -> Trajectory:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != TRAJECTORY_MAGIC:
        raise CheckpointFormatError(f"{path} is not a trajectory file")
    version, length = struct.unpack_from("<IQ", raw, 4)
    if version != TRAJECTORY_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported trajectory version {version}")
    offset = 4 + struct.calcsize("<IQ")
    try:
        header = json.loads(raw[offset:offset + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: corrupt trajectory header: {e}")
    dim, n, steps = header["dim"], header["num_nodes"], header["num_steps"]
    expected = steps * n * dim * 4
    body = raw[offset + length:]
    if len(body) != expected:
        raise CheckpointFormatError(f"{path}: expected {expected} frame bytes, found {len(body)}")
    positions = np.frombuffer(body, dtype="<f4").reshape(steps, n, dim).astype(np.float32)
    return Trajectory(
        dim=dim,
        elements=np.asarray(header["elements"], dtype=np.int64).reshape(-1, dim + 1),
        lam=np.asarray(header["lam"], dtype=np.float64),
        mu=np.asarray(header["mu"], dtype=np.float64),
        node_body=np.asarray(header["node_body"], dtype=np.int64),
        element_body=np.asarray(header["element_body"], dtype=np.int64),
        positions=positions,
        boundary_flags=np.asarray(header["boundary_flags"], dtype=np.int8).reshape(steps, n),
        metadata=header.get("metadata", {}),
    )
