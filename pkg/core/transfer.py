# core/transfer.py
"""
Checkpoint persistence and transfer-learning surgery between model configs.
"""

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from utils.constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION, NORMALIZER_FAMILIES
from utils.errors import CheckpointFormatError, ConfigurationError, StructuralError
from utils.types import ModelConfig, Strategy, TransferEntry, TransferReport
from utils.utils import canonical_json

from .sgunet import SgunetModel, SgunetParams, normalizer_widths, parameter_shapes, processor_prefixes
from .tensorcore import AdamState, RunningNormalizer, parameter

logger = logging.getLogger(__name__)

_HEADER = struct.Struct("<IQ")
NORMALIZER_PREFIX = "normalizer."


def normalizer_shapes(dim: int) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    for family, width in normalizer_widths(dim).items():
        shapes[f"{NORMALIZER_PREFIX}{family}.count"] = (1,)
        shapes[f"{NORMALIZER_PREFIX}{family}.sum"] = (width,)
        shapes[f"{NORMALIZER_PREFIX}{family}.sumsq"] = (width,)
    return shapes


def checkpoint_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Every tensor a checkpoint of this config holds, in file order."""
    shapes = dict(parameter_shapes(config))
    shapes.update(normalizer_shapes(config.dim))
    return shapes


@dataclass
class Checkpoint:
    """
    Config plus named tensors: float32 parameters, then float64 normalizer statistics.

    On disk the parameters fill the float32 data section; the statistics live
    in the manifest as exact decimal floats so resumed runs keep every bit.
    """
    config: ModelConfig
    tensors: Dict[str, np.ndarray]
    optimizer: Optional[AdamState] = None
    version: int = CHECKPOINT_VERSION

    def parameter_names(self) -> List[str]:
        return [name for name in self.tensors if not name.startswith(NORMALIZER_PREFIX)]

    def statistic_names(self) -> List[str]:
        return [name for name in self.tensors if name.startswith(NORMALIZER_PREFIX)]

    def validate(self) -> None:
        expected = checkpoint_shapes(self.config)
        if list(self.tensors) != list(expected):
            unknown = [name for name in self.tensors if name not in expected]
            missing = [name for name in expected if name not in self.tensors]
            raise StructuralError(
                f"checkpoint tensors do not match config: unknown {unknown[:3]}, missing {missing[:3]}"
            )
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise StructuralError(f"{name} has shape {self.tensors[name].shape}, expected {shape}")

    @classmethod
    def from_model(cls, model: SgunetModel, optimizer: Optional[AdamState] = None) -> "Checkpoint":
        tensors = {name: np.asarray(t.data, dtype=np.float32).copy() for name, t in model.parameters().items()}
        for family in NORMALIZER_FAMILIES:
            for key, value in model.normalizers[family].state_arrays().items():
                tensors[f"{NORMALIZER_PREFIX}{family}.{key}"] = value.astype(np.float64)
        ckpt = cls(model.config, tensors, optimizer)
        ckpt.validate()
        return ckpt

    def to_model(self) -> SgunetModel:
        self.validate()
        params = SgunetParams.from_named(
            self.config,
            {name: parameter(self.tensors[name], name=name) for name in parameter_shapes(self.config)},
        )
        normalizers = {
            family: RunningNormalizer.from_arrays({
                key: self.tensors[f"{NORMALIZER_PREFIX}{family}.{key}"] for key in ("count", "sum", "sumsq")
            })
            for family in NORMALIZER_FAMILIES
        }
        return SgunetModel(params, normalizers)

    def save(self, path: Union[str, Path]) -> None:
        """magic | version, manifest length | canonical JSON manifest | float32 LE parameter data."""
        self.validate()
        manifest = {
            "config": self.config.model_dump(mode="json"),
            "tensors": [{"name": name, "shape": list(self.tensors[name].shape)} for name in self.parameter_names()],
            "statistics": {
                name: np.asarray(self.tensors[name], dtype=np.float64).ravel().tolist()
                for name in self.statistic_names()
            },
            "optimizer": None,
        }
        opt_names: List[str] = []
        if self.optimizer is not None:
            opt_names = [name for name in self.parameter_names() if name in self.optimizer.m]
            manifest["optimizer"] = {"step": self.optimizer.step, "names": opt_names}
        blob = canonical_json(manifest)
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(_HEADER.pack(self.version, len(blob)))
            f.write(blob)
            for name in self.parameter_names():
                f.write(np.ascontiguousarray(self.tensors[name], dtype="<f4").tobytes())
            for moments in (self.optimizer.m, self.optimizer.v) if self.optimizer is not None else ():
                for name in opt_names:
                    f.write(np.ascontiguousarray(moments[name], dtype="<f4").tobytes())
        logger.debug(f"Saved checkpoint {path} ({len(self.tensors)} tensors)")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        with open(path, "rb") as f:
            raw = f.read()
        if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"{path} does not start with {CHECKPOINT_MAGIC!r}")
        offset = len(CHECKPOINT_MAGIC)
        if len(raw) < offset + _HEADER.size:
            raise CheckpointFormatError(f"{path} is truncated")
        version, length = _HEADER.unpack_from(raw, offset)
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
        offset += _HEADER.size
        try:
            manifest = json.loads(raw[offset:offset + length].decode("utf-8"))
            config = ModelConfig(**manifest["config"])
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise CheckpointFormatError(f"{path}: corrupt manifest: {e}")
        offset += length

        def read(shape: Sequence[int]) -> np.ndarray:
            nonlocal offset
            count = int(np.prod(shape)) if shape else 1
            end = offset + 4 * count
            if end > len(raw):
                raise CheckpointFormatError(f"{path}: tensor data is truncated")
            arr = np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape).astype(np.float32)
            offset = end
            return arr

        tensors = {entry["name"]: read(entry["shape"]) for entry in manifest["tensors"]}
        statistics = dict(manifest.get("statistics") or {})
        names = [name for name in normalizer_shapes(config.dim) if name in statistics]
        names += [name for name in statistics if name not in names]
        try:
            for name in names:
                tensors[name] = np.asarray(statistics[name], dtype=np.float64)
        except (TypeError, ValueError) as e:
            raise CheckpointFormatError(f"{path}: corrupt normalizer statistics: {e}")
        optimizer = None
        if manifest.get("optimizer"):
            names = manifest["optimizer"]["names"]
            m = {name: read(tensors[name].shape) for name in names}
            v = {name: read(tensors[name].shape) for name in names}
            optimizer = AdamState(step=int(manifest["optimizer"]["step"]), m=m, v=v)
        if offset != len(raw):
            raise CheckpointFormatError(f"{path}: {len(raw) - offset} trailing bytes")
        ckpt = cls(config, tensors, optimizer, version)
        ckpt.validate()
        return ckpt


# ===== Section: depth mappings =====

def uniform_groups(m_src: int, m_tgt: int) -> List[List[int]]:
    """
    Source indices feeding each target index under the Uniform strategy.

    Upscaling replicates source block floor(i / ceil(m_tgt / m_src)); downscaling
    averages contiguous runs whose lengths differ by at most one.
    """
    if m_tgt == 0:
        return []
    if m_src == 0:
        return [[] for _ in range(m_tgt)]
    if m_src == m_tgt:
        return [[i] for i in range(m_tgt)]
    if m_src < m_tgt:
        up = math.ceil(m_tgt / m_src)
        return [[i // up] for i in range(m_tgt)]
    down, rem = divmod(m_src, m_tgt)
    groups = []
    for i in range(m_tgt):
        start = (down + 1) * i if i < rem else down * i + rem
        size = down + 1 if i < rem else down
        groups.append(list(range(start, start + size)))
    return groups


def first_n_groups(m_src: int, m_tgt: int) -> List[List[int]]:
    return [[i] if i < m_src else [] for i in range(m_tgt)]


def mapping_groups(m_src: int, m_tgt: int, strategy: Strategy) -> List[List[int]]:
    if Strategy(strategy) is Strategy.UNIFORM:
        return uniform_groups(m_src, m_tgt)
    return first_n_groups(m_src, m_tgt)


@dataclass
class MappedBlock:
    """Tensors of one GNB (relative names) and the source block prefixes behind them."""
    tensors: Optional[Dict[str, np.ndarray]]
    sources: List[str] = field(default_factory=list)
    averaged: bool = False

    @property
    def fresh(self) -> bool:
        return self.tensors is None


def _combine(blocks: Sequence[MappedBlock]) -> MappedBlock:
    if not blocks:
        return MappedBlock(None)
    if len(blocks) == 1:
        b = blocks[0]
        tensors = None if b.fresh else {k: v.copy() for k, v in b.tensors.items()}
        return MappedBlock(tensors, list(b.sources), b.averaged)
    if any(b.fresh for b in blocks):
        raise StructuralError("cannot average a freshly initialized block")
    keys = list(blocks[0].tensors)
    for b in blocks[1:]:
        if list(b.tensors) != keys or any(b.tensors[k].shape != blocks[0].tensors[k].shape for k in keys):
            raise StructuralError(f"blocks {blocks[0].sources} and {b.sources} differ in shape")
    tensors = {
        k: np.mean(np.stack([b.tensors[k] for b in blocks]), axis=0).astype(blocks[0].tensors[k].dtype)
        for k in keys
    }
    sources = [s for b in blocks for s in b.sources]
    return MappedBlock(tensors, sources, True)


def map_processor(src_blocks: Sequence[MappedBlock], m_ft: int, strategy: Strategy) -> List[MappedBlock]:
    """Align a Processor of len(src_blocks) GNBs to m_ft GNBs; unmatched targets come back fresh."""
    for b in src_blocks[1:]:
        first = src_blocks[0]
        if first.fresh or b.fresh:
            continue
        if list(b.tensors) != list(first.tensors) or any(
            b.tensors[k].shape != v.shape for k, v in first.tensors.items()
        ):
            raise StructuralError(f"processor blocks {first.sources} and {b.sources} differ in shape")
    return [_combine([src_blocks[j] for j in group]) for group in mapping_groups(len(src_blocks), m_ft, strategy)]


StageBlocks = Dict[str, List[MappedBlock]]


def map_gunet(
    src_stages: Sequence[StageBlocks],
    l_ft: int,
    strategy: Strategy,
    m_gu_ft: int,
) -> List[StageBlocks]:
    """
    Align GUnet stages: map every source stage's Processors to m_gu_ft blocks,
    then map the stage sequence itself to l_ft stages with the same strategy.
    """
    aligned = [
        {role: map_processor(blocks, m_gu_ft, strategy) for role, blocks in stage.items()}
        for stage in src_stages
    ]
    out: List[StageBlocks] = []
    for group in mapping_groups(len(aligned), l_ft, strategy):
        if not group:
            out.append({role: [MappedBlock(None) for _ in range(m_gu_ft)] for role in ("prE", "prD")})
            continue
        out.append({
            role: [_combine([aligned[j][role][k] for j in group]) for k in range(m_gu_ft)]
            for role in ("prE", "prD")
        })
    return out


def _block(tensors: Mapping[str, np.ndarray], prefix: str) -> MappedBlock:
    rel = {name[len(prefix) + 1:]: arr for name, arr in tensors.items() if name.startswith(prefix + ".")}
    if not rel:
        raise StructuralError(f"no tensors under {prefix}")
    return MappedBlock(rel, [prefix])


def _processor_blocks(tensors: Mapping[str, np.ndarray], base: str, steps: int) -> List[MappedBlock]:
    return [_block(tensors, prefix) for prefix in processor_prefixes(base, steps)]


def transplant(
    src: Checkpoint,
    tgt_config: ModelConfig,
    strategy: Strategy,
    seed: int,
) -> Tuple[Checkpoint, TransferReport]:
    """
    Initialize a target-config checkpoint from a source checkpoint.

    Encoder, decoder and normalizers start fresh from ``seed``; the GUnet is
    mapped stage-wise and block-wise. Every target tensor gets a report entry.
    """
    strategy = Strategy(strategy)
    s_cfg = src.config
    for attr in ("dim", "latent", "hidden_layers"):
        if getattr(s_cfg, attr) != getattr(tgt_config, attr):
            raise ConfigurationError(
                f"cannot transplant across {attr}: source {getattr(s_cfg, attr)}, target {getattr(tgt_config, attr)}"
            )
    if s_cfg.baseline != tgt_config.baseline:
        raise ConfigurationError("cannot transplant between a flat baseline and a staged GUnet")
    src.validate()

    fresh = Checkpoint.from_model(SgunetModel.create(tgt_config, seed))
    tensors = dict(fresh.tensors)
    mapped: Dict[str, MappedBlock] = {}

    if tgt_config.baseline:
        blocks = map_processor(_processor_blocks(src.tensors, "gunet.flat", s_cfg.m_proc), tgt_config.m_proc, strategy)
        mapped.update(zip(processor_prefixes("gunet.flat", tgt_config.m_proc), blocks))
    else:
        src_stages = [
            {
                "prE": _processor_blocks(src.tensors, f"gunet.stage{i}.prE", s_cfg.m_gu),
                "prD": _processor_blocks(src.tensors, f"gunet.stage{i}.prD", s_cfg.m_gu),
            }
            for i in range(s_cfg.num_stages)
        ]
        for i, stage in enumerate(map_gunet(src_stages, tgt_config.num_stages, strategy, tgt_config.m_gu)):
            for role, blocks in stage.items():
                mapped.update(zip(processor_prefixes(f"gunet.stage{i}.{role}", tgt_config.m_gu), blocks))
        bottom = map_processor(_processor_blocks(src.tensors, "gunet.bottom", s_cfg.m_gu), tgt_config.m_gu, strategy)
        mapped.update(zip(processor_prefixes("gunet.bottom", tgt_config.m_gu), bottom))

    entries: List[TransferEntry] = []
    owners = {}
    for prefix, block in mapped.items():
        for rel in (block.tensors or {}):
            owners[f"{prefix}.{rel}"] = (prefix, rel)
    for name in tensors:
        if name not in owners:
            entries.append(TransferEntry(name=name, provenance="fresh"))
            continue
        prefix, rel = owners[name]
        block = mapped[prefix]
        tensors[name] = block.tensors[rel].astype(np.float32)
        entries.append(TransferEntry(
            name=name,
            provenance="averaged" if block.averaged else "copied",
            sources=[f"{source}.{rel}" for source in block.sources],
        ))

    ckpt = Checkpoint(tgt_config, tensors)
    ckpt.validate()
    report = TransferReport(strategy=strategy, source_config=s_cfg, target_config=tgt_config, entries=entries)
    counts = report.counts()
    logger.info(
        f"Transplant ({strategy.value}): {counts['copied']} copied, "
        f"{counts['averaged']} averaged, {counts['fresh']} fresh tensors"
    )
    return ckpt, report


# ===== Section: parameter restriction =====

def frobenius_penalty(
    anchor: Mapping[str, np.ndarray],
    current: Mapping[str, np.ndarray],
    names: Optional[Iterable[str]] = None,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Sum of squared Frobenius distances over anchored tensors.

    Returns:
        (penalty, gradient 2 (W_ft - W_pt) per anchored name)
    """
    names = list(anchor) if names is None else list(names)
    total = 0.0
    grads: Dict[str, np.ndarray] = {}
    for name in names:
        w_pt = np.asarray(anchor[name], dtype=np.float64)
        w_ft = np.asarray(current[name])
        if w_ft.shape != w_pt.shape:
            raise StructuralError(f"anchored tensor {name}: {w_ft.shape} vs {w_pt.shape}")
        diff = w_ft.astype(np.float64) - w_pt
        total += float(np.sum(diff * diff))
        grads[name] = (2.0 * diff).astype(w_ft.dtype)
    return total, grads
