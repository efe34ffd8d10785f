"""
Common type definitions shared by the simulator modules.
"""

from enum import Enum
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from typing_extensions import TypedDict
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .constants import (
    DEFAULT_HIDDEN_LAYERS,
    DEFAULT_LAMBDA_REG,
    DEFAULT_LATENT,
    DEFAULT_LOG_EVERY,
    DEFAULT_LR,
    DEFAULT_LR_FINAL,
    DEFAULT_VALIDATE_EVERY,
)

Split = Literal["train", "valid", "test"]
Provenance = Literal["copied", "averaged", "fresh"]


class Strategy(str, Enum):
    """Parameter-sharing strategies for transplanting a checkpoint."""
    UNIFORM = "uniform"  # replicate or average blocks to match depth
    FIRST_N = "first-n"  # copy the common prefix, fresh for the rest


class ModelConfig(BaseModel):
    """Architecture hyperparameters. Empty pooling_ratios selects the flat baseline."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    dim: int = Field(2, description="Spatial dimension, 2 or 3")
    latent: int = Field(DEFAULT_LATENT, description="Latent width of every node/edge family")
    hidden_layers: int = Field(DEFAULT_HIDDEN_LAYERS, description="Hidden layers per MLP")
    m_enc: int = Field(2, description="Message-passing steps in each encoder Processor")
    m_gu: int = Field(2, description="Steps per GUnet Processor")
    pooling_ratios: Tuple[int, ...] = Field((2,), description="One ratio per GUnet stage")
    m_proc: int = Field(0, description="Flat Processor steps in baseline mode")
    noise_std: float = Field(0.003, description="Input position noise std")
    world_radius: float = Field(0.05, description="Cross-body element edge radius")

    @field_validator("dim")
    @classmethod
    def _check_dim(cls, value: int) -> int:
        if value not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {value}")
        return value

    @field_validator("latent")
    @classmethod
    def _check_latent(cls, value: int) -> int:
        if value < 1:
            raise ValueError("latent must be positive")
        return value

    @field_validator("hidden_layers", "m_enc", "m_gu", "m_proc")
    @classmethod
    def _check_counts(cls, value: int) -> int:
        if value < 0:
            raise ValueError("step and layer counts must be >= 0")
        return value

    @field_validator("pooling_ratios")
    @classmethod
    def _check_ratios(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        if any(p < 2 for p in value):
            raise ValueError(f"pooling ratios must be >= 2, got {list(value)}")
        return value

    @field_validator("noise_std", "world_radius")
    @classmethod
    def _check_nonnegative(cls, value: float) -> float:
        if value < 0:
            raise ValueError("noise_std and world_radius must be >= 0")
        return value

    @model_validator(mode="after")
    def _check_mode(self) -> "ModelConfig":
        if self.pooling_ratios and self.m_proc:
            raise ValueError("m_proc is only used by the baseline (empty pooling_ratios)")
        return self

    @property
    def baseline(self) -> bool:
        return not self.pooling_ratios

    @property
    def num_stages(self) -> int:
        return len(self.pooling_ratios)


class ScenarioSpec(BaseModel):
    """One plate-indentation scenario for the FEM oracle."""
    model_config = ConfigDict(extra="forbid")

    family: str = "pretrain"
    nx: int = 16
    ny: int = 8
    width: float = 1.0
    height: float = 0.5
    lam: float = 100.0
    mu: float = 50.0
    indenter_radius: float = 0.1
    indenter_start: Tuple[float, float] = (0.5, 0.62)
    indenter_end: Tuple[float, float] = (0.5, 0.42)
    indenter_segments: int = 8
    steps: int = 20
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "ScenarioSpec":
        if self.steps < 2:
            raise ValueError("a scenario needs at least 2 steps")
        if self.nx < 2 or self.ny < 2:
            raise ValueError("plate resolution must be at least 2x2")
        if self.indenter_radius <= 0:
            raise ValueError("indenter radius must be positive")
        if self.mu <= 0 or self.lam < 0:
            raise ValueError("plate material needs mu > 0 and lambda >= 0")
        if self.indenter_segments < 3:
            raise ValueError("indenter needs at least 3 rim segments")
        return self


class ManifestEntry(BaseModel):
    """One generated trajectory file."""
    file: str
    seed: int
    split: Split
    family: str
    steps: int
    num_vertices: int
    scenario: ScenarioSpec


class DatasetManifest(BaseModel):
    """Listing of a generated dataset directory."""
    split_ratios: Tuple[int, int, int]
    entries: List[ManifestEntry] = Field(default_factory=list)

    def files(self, split: Split) -> List[str]:
        return [entry.file for entry in self.entries if entry.split == split]


class TrainRun(BaseModel):
    """Everything needed to reproduce one training run."""
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    config: ModelConfig = Field(default_factory=ModelConfig)
    manifest: Path
    out_dir: Path = Path("runs/default")
    steps: int = 20000
    batch_size: int = 1
    lr: float = DEFAULT_LR
    lr_final: float = DEFAULT_LR_FINAL
    lambda_reg: float = Field(DEFAULT_LAMBDA_REG, alias="lambda")
    seed: int = 0
    source_checkpoint: Optional[Path] = None
    strategy: Strategy = Strategy.UNIFORM
    data_fraction: float = 1.0
    validate_every: int = DEFAULT_VALIDATE_EVERY
    log_every: int = DEFAULT_LOG_EVERY
    max_valid_trajectories: int = 8

    @model_validator(mode="after")
    def _check(self) -> "TrainRun":
        if not 0.0 < self.data_fraction <= 1.0:
            raise ValueError(f"data_fraction must be in (0, 1], got {self.data_fraction}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.lr <= 0 or self.lr_final <= 0:
            raise ValueError("learning rates must be positive")
        if self.lambda_reg < 0:
            raise ValueError("lambda must be >= 0")
        if self.validate_every < 1 or self.log_every < 1:
            raise ValueError("validate_every and log_every must be positive")
        return self


class TransferEntry(BaseModel):
    """Provenance of one target tensor after transplant."""
    name: str
    provenance: Provenance
    sources: List[str] = Field(default_factory=list)


class TransferReport(BaseModel):
    """Per-tensor provenance for a transplanted checkpoint."""
    strategy: Strategy
    source_config: ModelConfig
    target_config: ModelConfig
    entries: List[TransferEntry] = Field(default_factory=list)

    def counts(self) -> Dict[str, int]:
        counts = {"copied": 0, "averaged": 0, "fresh": 0}
        for entry in self.entries:
            counts[entry.provenance] += 1
        return counts

    def anchored_names(self) -> List[str]:
        return [entry.name for entry in self.entries if entry.provenance != "fresh"]


class MetricRow(TypedDict):
    """One line of the training metric log."""
    step: int
    train_loss: float
    valid_rmse: float
    wall_time: float


class ExperimentSettings(BaseModel):
    """Scaled pre-train / fine-tune comparison (Uniform transplant vs. scratch)."""
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    out_dir: Path = Path("runs/experiment")
    config: ModelConfig = Field(default_factory=ModelConfig)
    pretrain_trajectories: int = 200
    finetune_trajectories: int = 16
    pretrain_steps: int = 20000
    finetune_steps: int = 2000
    fraction: float = 1.0 / 16
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    lambda_reg: float = Field(DEFAULT_LAMBDA_REG, alias="lambda")
    workers: int = 1

    @model_validator(mode="after")
    def _check(self) -> "ExperimentSettings":
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"fraction must be in (0, 1], got {self.fraction}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.pretrain_trajectories < 3 or self.finetune_trajectories < 3:
            raise ValueError("each dataset needs at least 3 trajectories (train/valid/test)")
        return self
