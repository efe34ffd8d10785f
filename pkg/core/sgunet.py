# core/sgunet.py
"""
Encoder - GUnet - Decoder network over the heterogeneous mesh graph.

Parameters live in one flat, ordered map of hierarchical names such as
``gunet.stage0.prE.gnb1.edge_mlp.w0``; the structure of the network is a
pure function of ModelConfig.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from utils.constants import MESH_EDGE_FAMILIES, NORMALIZER_FAMILIES
from utils.errors import StructuralError
from utils.types import ModelConfig
from utils.utils import make_rng

from .meshgraph import HeteroGraph, MeshState, MeshTopology, build_hetero_graph, build_topology
from .pooling import PoolingPlan, build_pooled_graph, build_pooling_plan, pool_features, unpool_features
from .tensorcore import (
    MlpParams,
    RunningNormalizer,
    Tensor,
    add,
    as_tensor,
    concat,
    gather,
    init_mlp,
    mlp_forward,
    segment_sum,
    sub,
)

logger = logging.getLogger(__name__)

ENCODER_FLOWS = ("mm", "ee", "me")


# ===== Section: parameter layout =====

def mlp_layout(config: ModelConfig) -> List[Tuple[str, List[int], bool]]:
    """Ordered (prefix, layer sizes, layer norm) for every MLP of a config."""
    latent, dim = config.latent, config.dim
    hidden = [latent] * config.hidden_layers
    layout: List[Tuple[str, List[int], bool]] = []

    raw_widths = {"node_m": 1 + dim, "node_e": 2 + dim}
    raw_widths.update({f"edge_{family}": 2 * dim + 2 for family in MESH_EDGE_FAMILIES})
    for family, width in raw_widths.items():
        layout.append((f"encoder.lift.{family}", [width] + hidden + [latent], True))

    def add_gnb(prefix: str) -> None:
        layout.append((f"{prefix}.edge_mlp", [3 * latent] + hidden + [latent], True))
        layout.append((f"{prefix}.node_mlp", [2 * latent] + hidden + [latent], True))

    for flow in ENCODER_FLOWS:
        for prefix in processor_prefixes(f"encoder.proc_{flow}", config.m_enc):
            add_gnb(prefix)
    if config.baseline:
        for prefix in processor_prefixes("gunet.flat", config.m_proc):
            add_gnb(prefix)
    else:
        for i in range(config.num_stages):
            for prefix in processor_prefixes(f"gunet.stage{i}.prE", config.m_gu):
                add_gnb(prefix)
            for prefix in processor_prefixes(f"gunet.stage{i}.prD", config.m_gu):
                add_gnb(prefix)
        for prefix in processor_prefixes("gunet.bottom", config.m_gu):
            add_gnb(prefix)

    layout.append(("decoder.element_mlp", [latent] + hidden + [dim], False))
    add_gnb("decoder.interp")
    layout.append(("decoder.mesh_mlp", [latent] + hidden + [dim], False))
    return layout


def processor_prefixes(base: str, steps: int) -> List[str]:
    return [f"{base}.gnb{k}" for k in range(steps)]


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Name -> shape for every trainable tensor, in checkpoint order."""
    shapes: Dict[str, Tuple[int, ...]] = {}
    for prefix, sizes, norm in mlp_layout(config):
        for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            shapes[f"{prefix}.w{k}"] = (a, b)
            shapes[f"{prefix}.b{k}"] = (b,)
        if norm:
            shapes[f"{prefix}.ln_gain"] = (sizes[-1],)
            shapes[f"{prefix}.ln_bias"] = (sizes[-1],)
    return shapes


def count_parameters(config: ModelConfig) -> int:
    return int(sum(np.prod(shape) for shape in parameter_shapes(config).values()))


@dataclass
class GnbParams:
    edge_mlp: MlpParams
    node_mlp: MlpParams


@dataclass
class SgunetParams:
    """All MLPs of one network, keyed by their hierarchical prefix."""
    config: ModelConfig
    mlps: Dict[str, MlpParams]

    def gnb(self, prefix: str) -> GnbParams:
        return GnbParams(self.mlps[f"{prefix}.edge_mlp"], self.mlps[f"{prefix}.node_mlp"])

    def processor(self, base: str, steps: int) -> List[GnbParams]:
        return [self.gnb(prefix) for prefix in processor_prefixes(base, steps)]

    def named(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for prefix, mlp in self.mlps.items():
            for key, tensor in mlp.named().items():
                out[f"{prefix}.{key}"] = tensor
        return out

    @classmethod
    def from_named(cls, config: ModelConfig, tensors: Mapping[str, Tensor]) -> "SgunetParams":
        """Rebuild the MLP map from flat tensors, checking names and shapes."""
        expected = parameter_shapes(config)
        missing = [name for name in expected if name not in tensors]
        extra = [name for name in tensors if name not in expected]
        if missing or extra:
            raise StructuralError(
                f"parameter names do not match config: missing {missing[:3]}, unexpected {extra[:3]}"
            )
        for name, shape in expected.items():
            if tuple(tensors[name].shape) != shape:
                raise StructuralError(f"{name} has shape {tuple(tensors[name].shape)}, expected {shape}")
        mlps: Dict[str, MlpParams] = {}
        for prefix, _, _ in mlp_layout(config):
            sub_tensors = {
                name[len(prefix) + 1:]: tensor
                for name, tensor in tensors.items()
                if name.startswith(prefix + ".")
            }
            mlps[prefix] = MlpParams.from_named(sub_tensors)
        return cls(config, mlps)


def init_params(config: ModelConfig, seed: int) -> SgunetParams:
    """Glorot-uniform weights, zero biases; every MLP draws from its own stream."""
    mlps: Dict[str, MlpParams] = {}
    for index, (prefix, sizes, norm) in enumerate(mlp_layout(config)):
        mlps[prefix] = init_mlp(sizes, make_rng(seed, index), layer_norm=norm)
    for prefix, mlp in mlps.items():
        for key, tensor in mlp.named().items():
            tensor.name = f"{prefix}.{key}"
    return SgunetParams(config, mlps)


# ===== Section: message passing =====

def gnb_apply(
    params: GnbParams,
    x_src: Tensor,
    x_tgt: Tensor,
    senders: np.ndarray,
    receivers: np.ndarray,
    edges: Tensor,
) -> Tuple[Tensor, Tensor]:
    """
    One Graph-Net block: update edges from both endpoints, then update targets
    from the sum of their incoming updated edges. Both updates are residual.

    Returns:
        (updated target node features, updated edge features)
    """
    edge_in = concat([gather(x_src, senders), gather(x_tgt, receivers), edges], axis=-1)
    new_edges = add(edges, mlp_forward(params.edge_mlp, edge_in))
    aggregated = segment_sum(new_edges, receivers, x_tgt.shape[0])
    node_in = concat([x_tgt, aggregated], axis=-1)
    new_nodes = add(x_tgt, mlp_forward(params.node_mlp, node_in))
    return new_nodes, new_edges


def processor_apply(
    blocks: Sequence[GnbParams],
    x: Tensor,
    senders: np.ndarray,
    receivers: np.ndarray,
    edges: Tensor,
) -> Tuple[Tensor, Tensor]:
    """Sequential GNBs on one homogeneous node family."""
    for block in blocks:
        x, edges = gnb_apply(block, x, x, senders, receivers, edges)
    return x, edges


@dataclass
class LatentGraph:
    """Encoder output: the homogeneous element graph plus what the decoder needs."""
    xe: Tensor
    ee_senders: np.ndarray
    ee_receivers: np.ndarray
    ee_edges: Tensor
    xm: Tensor
    em_edges: Tensor


def encode(
    graph: HeteroGraph,
    params: SgunetParams,
    normalizers: Optional[Mapping[str, RunningNormalizer]] = None,
) -> LatentGraph:
    config = params.config
    lift = {family: params.mlps[f"encoder.lift.{family}"] for family in ("node_m", "node_e")}

    def raw(family: str, rows: np.ndarray) -> Tensor:
        if normalizers is not None and family in normalizers:
            return as_tensor(normalizers[family].apply(rows))
        return as_tensor(rows)

    xm = mlp_forward(lift["node_m"], raw("node_m", graph.xm))
    xe = mlp_forward(lift["node_e"], raw("node_e", graph.xe))
    edges = {
        family: mlp_forward(
            params.mlps[f"encoder.lift.edge_{family}"],
            raw(f"edge_{family}", graph.edges[family].features),
        )
        for family in MESH_EDGE_FAMILIES
    }
    mm, ee, me = graph.edges["mm"], graph.edges["ee"], graph.edges["me"]

    xm, _ = processor_apply(params.processor("encoder.proc_mm", config.m_enc), xm, mm.senders, mm.receivers, edges["mm"])
    xe, ee_edges = processor_apply(
        params.processor("encoder.proc_ee", config.m_enc), xe, ee.senders, ee.receivers, edges["ee"]
    )
    me_edges = edges["me"]
    for block in params.processor("encoder.proc_me", config.m_enc):
        xe, me_edges = gnb_apply(block, xm, xe, me.senders, me.receivers, me_edges)

    return LatentGraph(
        xe=xe,
        ee_senders=ee.senders,
        ee_receivers=ee.receivers,
        ee_edges=ee_edges,
        xm=xm,
        em_edges=edges["em"],
    )


def gunet_apply(
    x: Tensor,
    senders: np.ndarray,
    receivers: np.ndarray,
    edges: Tensor,
    plan: Optional[PoolingPlan],
    params: SgunetParams,
) -> Tensor:
    """
    Descend through the pooling stages, run the bottom Processor, ascend.

    On the way up every fine level receives its saved features plus the
    unpooled change that the coarser levels made to the pooled features.
    The ascent Processor reuses the saved fine edge features.
    """
    config = params.config
    if config.baseline:
        x, _ = processor_apply(params.processor("gunet.flat", config.m_proc), x, senders, receivers, edges)
        return x
    if plan is None or len(plan) != config.num_stages:
        raise StructuralError(
            f"GUnet with {config.num_stages} stages needs a plan of the same depth, "
            f"got {None if plan is None else len(plan)}"
        )

    saved = []
    for i, stage in enumerate(plan.stages):
        x, edges = processor_apply(params.processor(f"gunet.stage{i}.prE", config.m_gu), x, senders, receivers, edges)
        topology = build_pooled_graph(senders, receivers, stage.cluster, stage.num_clusters)
        pooled_x, pooled_edges = pool_features(x, edges, stage, topology)
        saved.append((x, edges, senders, receivers, pooled_x))
        x, edges = pooled_x, pooled_edges
        senders, receivers = topology.senders, topology.receivers

    x, _ = processor_apply(params.processor("gunet.bottom", config.m_gu), x, senders, receivers, edges)

    for i in reversed(range(len(plan.stages))):
        fine_x, fine_edges, senders, receivers, pooled_in = saved[i]
        x = add(fine_x, unpool_features(sub(x, pooled_in), plan.stages[i]))
        x, _ = processor_apply(params.processor(f"gunet.stage{i}.prD", config.m_gu), x, senders, receivers, fine_edges)
    return x


def decode(xe: Tensor, latent: LatentGraph, graph: HeteroGraph, params: SgunetParams) -> Tuple[Tensor, Tensor]:
    """Per-mesh-node and per-element outputs, each ``dim`` wide."""
    out_e = mlp_forward(params.mlps["decoder.element_mlp"], xe)
    em = graph.edges["em"]
    xm, _ = gnb_apply(params.gnb("decoder.interp"), xe, latent.xm, em.senders, em.receivers, latent.em_edges)
    out_m = mlp_forward(params.mlps["decoder.mesh_mlp"], xm)
    return out_m, out_e


def plan_for(topology: MeshTopology, config: ModelConfig) -> Optional[PoolingPlan]:
    """Pooling plan of a trajectory topology; None for the flat baseline."""
    if config.baseline:
        return None
    plan = build_pooling_plan(
        topology.ee_senders, topology.ee_receivers, topology.num_elements,
        topology.material, config.pooling_ratios,
    )
    logger.debug(
        f"pooling plan: {topology.num_elements} elements -> "
        f"{[stage.num_clusters for stage in plan.stages]} clusters"
    )
    return plan


def apply_graph(
    graph: HeteroGraph,
    params: SgunetParams,
    plan: Optional[PoolingPlan],
    normalizers: Optional[Mapping[str, RunningNormalizer]] = None,
) -> Tuple[Tensor, Tensor]:
    latent = encode(graph, params, normalizers)
    xe = gunet_apply(latent.xe, latent.ee_senders, latent.ee_receivers, latent.ee_edges, plan, params)
    return decode(xe, latent, graph, params)


def forward(
    state: MeshState,
    params: SgunetParams,
    plan: Optional[PoolingPlan] = None,
    normalizers: Optional[Mapping[str, RunningNormalizer]] = None,
    topology: Optional[MeshTopology] = None,
) -> Tuple[Tensor, Tensor]:
    """
    Normalized next-step displacement predictions for one state.

    Returns:
        (mesh-node predictions (n, dim), element predictions (m, dim))
    """
    if topology is None:
        topology = build_topology(state)
    if plan is None:
        plan = plan_for(topology, params.config)
    graph = build_hetero_graph(state, params.config.world_radius, topology)
    return apply_graph(graph, params, plan, normalizers)


# ===== Section: model bundle =====

def normalizer_widths(dim: int) -> Dict[str, int]:
    widths = {"node_m": 1 + dim, "node_e": 2 + dim, "target_m": dim, "target_e": dim}
    widths.update({f"edge_{family}": 2 * dim + 2 for family in MESH_EDGE_FAMILIES})
    return {family: widths[family] for family in NORMALIZER_FAMILIES}


class SgunetModel:
    """Config, parameters and the running feature/target normalizers."""

    def __init__(
        self,
        params: SgunetParams,
        normalizers: Optional[Dict[str, RunningNormalizer]] = None,
    ):
        self.params = params
        self.config = params.config
        if normalizers is None:
            normalizers = {
                family: RunningNormalizer(width)
                for family, width in normalizer_widths(self.config.dim).items()
            }
        self.normalizers = normalizers

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "SgunetModel":
        return cls(init_params(config, seed))

    def parameters(self) -> Dict[str, Tensor]:
        return self.params.named()

    def parameter_arrays(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data for name, tensor in self.parameters().items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Overwrite parameter values in place (names must exist)."""
        params = self.parameters()
        for name, value in arrays.items():
            if name not in params:
                raise StructuralError(f"unknown parameter {name}")
            if params[name].shape != value.shape:
                raise StructuralError(f"{name}: shape {value.shape} != {params[name].shape}")
            params[name].data = np.asarray(value, dtype=params[name].dtype)

    def zero_grad(self) -> None:
        for tensor in self.parameters().values():
            tensor.zero_grad()

    def observe(self, graph: HeteroGraph, target_m: np.ndarray, target_e: np.ndarray) -> None:
        """Accumulate input and target statistics (training only)."""
        self.normalizers["node_m"].update(graph.xm)
        self.normalizers["node_e"].update(graph.xe)
        for family in MESH_EDGE_FAMILIES:
            self.normalizers[f"edge_{family}"].update(graph.edges[family].features)
        self.normalizers["target_m"].update(target_m)
        self.normalizers["target_e"].update(target_e)

    def predict_graph(self, graph: HeteroGraph, plan: Optional[PoolingPlan]) -> Tuple[Tensor, Tensor]:
        return apply_graph(graph, self.params, plan, self.normalizers)

    def predict(
        self,
        state: MeshState,
        plan: Optional[PoolingPlan] = None,
        topology: Optional[MeshTopology] = None,
    ) -> Tuple[Tensor, Tensor]:
        return forward(state, self.params, plan, self.normalizers, topology)

    def denormalize_mesh(self, pred_m: np.ndarray) -> np.ndarray:
        """Map normalized mesh-node predictions back to displacements."""
        return self.normalizers["target_m"].inverse(pred_m)
