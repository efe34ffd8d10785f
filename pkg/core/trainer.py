# core/trainer.py
"""
Training loop, noisy one-step samples, autoregressive rollout and metrics.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from utils.constants import CHECKPOINT_SUFFIX, METRIC_COLUMNS, METRIC_HEADER
from utils.errors import ConfigurationError, TrainingDivergedError
from utils.types import MetricRow, TrainRun, TransferReport
from utils.utils import exponential_lr, fraction_count, make_rng

from .meshgraph import MeshState, MeshTopology, Trajectory, build_hetero_graph, build_topology, centroids, load_trajectory
from .pooling import PoolingPlan
from .sgunet import SgunetModel, plan_for
from .simgen import load_manifest
from .tensorcore import AdamState, RunningNormalizer, Tensor, adam_step, as_tensor, mul, scale, square, sub, sum_all
from .transfer import Checkpoint, frobenius_penalty, transplant

logger = logging.getLogger(__name__)

Predictor = Callable[[MeshState, int], np.ndarray]


@dataclass
class Sample:
    """Noisy input state plus raw (unnormalized) targets and loss masks."""
    state: MeshState
    target_m: np.ndarray
    target_e: np.ndarray
    mask_m: np.ndarray


def noisy_sample(
    pair: Tuple[MeshState, MeshState],
    noise_std: float,
    rng: Union[int, np.random.Generator],
) -> Sample:
    """
    Perturb the free vertices of step t and retarget so the clean t+1 is recovered.

    The input carries the boundary flags of step t+1; prescribed vertices get
    no noise. Element targets follow from the noised vertices.
    """
    current, nxt = pair
    if isinstance(rng, (int, np.integer)):
        rng = make_rng(int(rng))
    flags = nxt.boundary_flag
    positions = current.positions.astype(np.float64)
    if noise_std > 0:
        noise = rng.normal(0.0, noise_std, size=positions.shape)
        noise[flags == 1] = 0.0
        positions = positions + noise
    state = current.with_positions(positions, flags)
    next_positions = nxt.positions.astype(np.float64)
    target_m = next_positions - positions
    target_e = centroids(next_positions, current.elements) - centroids(positions, current.elements)
    return Sample(state, target_m, target_e, flags == 0)


def task_loss(
    pred_m: Tensor,
    pred_e: Tensor,
    target_m: np.ndarray,
    target_e: np.ndarray,
    normalizers: Optional[Mapping[str, RunningNormalizer]] = None,
    mask_m: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Squared error in normalized target space, summed over free mesh nodes and
    all element nodes, divided by the total node count of both families.
    """
    if normalizers is not None:
        target_m = normalizers["target_m"].apply(np.asarray(target_m))
        target_e = normalizers["target_e"].apply(np.asarray(target_e))
    if mask_m is None:
        mask_m = np.ones(pred_m.shape[0], dtype=bool)
    mask_e = np.ones(pred_e.shape[0], dtype=bool)
    count = pred_m.shape[0] + pred_e.shape[0]
    dtype = pred_m.dtype
    terms = []
    for pred, target, mask in ((pred_m, target_m, mask_m), (pred_e, target_e, mask_e)):
        diff = sub(pred, as_tensor(np.asarray(target, dtype=dtype), like=pred))
        weighted = mul(square(diff), Tensor(mask.astype(dtype)[:, None]))
        terms.append(sum_all(weighted))
    total = terms[0] + terms[1]
    return scale(total, 1.0 / max(count, 1))


# ===== Section: rollout and metrics =====

def rollout(
    model: Optional[SgunetModel],
    trajectory: Trajectory,
    plan: Optional[PoolingPlan] = None,
    predictor: Optional[Predictor] = None,
) -> np.ndarray:
    """
    Predict positions autoregressively from the true initial state.

    Prescribed vertices follow the ground truth of each step; graph features
    and world edges are rebuilt every step while the pooling plan is fixed.

    Args:
        model: Trained model (ignored when ``predictor`` is given)
        trajectory: Ground-truth trajectory supplying the start, topology
            and scripted motion
        plan: Pooling plan of the trajectory topology (built when omitted)
        predictor: Optional (input state, step) -> displacement override

    Returns:
        (T - 1, n, dim) predicted positions for steps 1..T-1
    """
    state = trajectory.state(0)
    topology = build_topology(state)
    if predictor is None and plan is None:
        plan = plan_for(topology, model.config)
    positions = state.positions.astype(np.float64)
    out = []
    for t in range(len(trajectory) - 1):
        truth = trajectory.state(t + 1)
        flags = truth.boundary_flag
        inp = state.with_positions(positions, flags)
        if predictor is not None:
            disp = predictor(inp, t)
        else:
            pred_m, _ = model.predict(inp, plan, topology)
            disp = model.denormalize_mesh(pred_m.data).astype(np.float64)
        positions = positions + disp
        scripted = flags == 1
        positions[scripted] = truth.positions[scripted]
        out.append(positions.copy())
    return np.stack(out) if out else np.zeros((0,) + positions.shape)


def position_rmse(pred: np.ndarray, true: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """
    RMSE over scalar coordinate entries of the selected vertices.

    Args:
        pred, true: (T, n, dim) positions
        mask: (T, n) or (n,) vertices to include; all when omitted
    """
    pred, true = np.asarray(pred, dtype=np.float64), np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise ConfigurationError(f"prediction shape {pred.shape} differs from truth {true.shape}")
    sq = (pred - true) ** 2
    if mask is not None:
        mask = np.broadcast_to(mask, sq.shape[:-1])
        sq = sq[mask]
    if sq.size == 0:
        return 0.0
    return float(np.sqrt(sq.mean()))


def rollout_rmse(model: SgunetModel, trajectory: Trajectory, plan: Optional[PoolingPlan] = None) -> float:
    pred = rollout(model, trajectory, plan)
    return position_rmse(pred, trajectory.positions[1:], trajectory.boundary_flags[1:] == 0)


def evaluate(model: SgunetModel, trajectories: Sequence[Trajectory], plans: Optional[Sequence] = None) -> float:
    """Mean rollout RMSE over trajectories (NaN for an empty set)."""
    if not trajectories:
        return float("nan")
    plans = plans or [None] * len(trajectories)
    return float(np.mean([rollout_rmse(model, traj, plan) for traj, plan in zip(trajectories, plans)]))


# ===== Section: data =====

def subsample_files(files: Sequence[str], fraction: float, seed: int) -> List[str]:
    """Seeded prefix of a permutation; smaller fractions give subsets of larger ones."""
    files = sorted(files)
    if not files:
        return []
    order = make_rng(seed).permutation(len(files))
    return [files[i] for i in order[:fraction_count(len(files), fraction)]]


@dataclass
class PreparedTrajectory:
    name: str
    trajectory: Trajectory
    topology: MeshTopology
    plan: Optional[PoolingPlan]


def prepare(paths: Sequence[Path], model: SgunetModel) -> List[PreparedTrajectory]:
    out = []
    for path in paths:
        traj = load_trajectory(path)
        if len(traj) < 2:
            raise ConfigurationError(f"{path} holds {len(traj)} step(s); training needs at least 2")
        topology = build_topology(traj.state(0))
        out.append(PreparedTrajectory(Path(path).name, traj, topology, plan_for(topology, model.config)))
    return out


# ===== Section: training =====

@dataclass
class TrainResult:
    model: SgunetModel
    best_path: Path
    last_path: Path
    metrics: pd.DataFrame
    report: Optional[TransferReport] = None
    anchor: Dict[str, np.ndarray] = field(default_factory=dict)


def write_metrics(path: Union[str, Path], rows: Sequence[MetricRow]) -> None:
    frame = pd.DataFrame(list(rows), columns=METRIC_COLUMNS)
    with open(path, "w") as f:
        f.write(METRIC_HEADER + "\n")
        frame.to_csv(f, index=False)


def read_metrics(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def initial_model(run: TrainRun) -> Tuple[SgunetModel, Optional[TransferReport], Dict[str, np.ndarray]]:
    """Fresh model, or a transplant of the source checkpoint with its anchor tensors."""
    if run.source_checkpoint is None:
        return SgunetModel.create(run.config, run.seed), None, {}
    source = Checkpoint.load(run.source_checkpoint)
    ckpt, report = transplant(source, run.config, run.strategy, run.seed)
    anchor = {name: ckpt.tensors[name].copy() for name in report.anchored_names()}
    return ckpt.to_model(), report, anchor


def train(run: TrainRun, model: Optional[SgunetModel] = None) -> TrainResult:
    """
    Fit a model on the manifest's training split.

    Each step draws a batch of (trajectory, t) pairs, adds input noise,
    updates the normalizers, and takes one Adam step on the task loss plus
    the weighted Frobenius anchor. Full-rollout validation runs every
    ``validate_every`` steps and on the last step; the best model by
    validation RMSE is saved as ``best.sgck``.
    """
    manifest_path = Path(run.manifest)
    manifest = load_manifest(manifest_path)
    data_dir = manifest_path if manifest_path.is_dir() else manifest_path.parent

    report, anchor = None, {}
    if model is None:
        model, report, anchor = initial_model(run)
    config = model.config

    train_files = subsample_files(manifest.files("train"), run.data_fraction, run.seed)
    if not train_files:
        raise ConfigurationError(f"No training trajectories listed in {manifest_path}")
    valid_files = sorted(manifest.files("valid"))[:run.max_valid_trajectories]
    train_set = prepare([data_dir / f for f in train_files], model)
    valid_set = prepare([data_dir / f for f in valid_files], model)
    logger.info(
        f"Training on {len(train_set)} trajectories (fraction {run.data_fraction}), "
        f"validating on {len(valid_set)}"
    )

    out_dir = Path(run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best_path = out_dir / f"best{CHECKPOINT_SUFFIX}"
    last_path = out_dir / f"last{CHECKPOINT_SUFFIX}"

    optimizer = AdamState()
    rows: List[MetricRow] = []
    best = math.inf
    saved_best = False
    start = time.perf_counter()
    anchored = run.lambda_reg > 0 and bool(anchor)

    for step in range(run.steps):
        rng = make_rng(run.seed, step)
        lr = exponential_lr(step, run.steps, run.lr, run.lr_final)
        total: Optional[Tensor] = None
        picks = []
        for _ in range(run.batch_size):
            item = train_set[int(rng.integers(len(train_set)))]
            t = int(rng.integers(len(item.trajectory) - 1))
            picks.append(f"{item.name}@{t}")
            sample = noisy_sample(
                (item.trajectory.state(t), item.trajectory.state(t + 1)), config.noise_std, rng
            )
            graph = build_hetero_graph(sample.state, config.world_radius, item.topology)
            model.observe(graph, sample.target_m[sample.mask_m], sample.target_e)
            pred_m, pred_e = model.predict_graph(graph, item.plan)
            loss = task_loss(
                pred_m, pred_e, sample.target_m, sample.target_e,
                model.normalizers, sample.mask_m,
            )
            total = loss if total is None else total + loss
        total = scale(total, 1.0 / run.batch_size)
        loss_value = float(total.data)
        if not np.isfinite(loss_value):
            raise TrainingDivergedError(f"Non-finite loss at step {step} on batch {picks}")

        model.zero_grad()
        total.backward()
        params = model.parameters()
        grads = {name: t.grad for name, t in params.items() if t.grad is not None}
        if anchored:
            penalty, pgrads = frobenius_penalty(anchor, model.parameter_arrays(), anchor.keys())
            for name, g in pgrads.items():
                grads[name] = grads[name] + run.lambda_reg * g if name in grads else run.lambda_reg * g
            loss_value += run.lambda_reg * penalty
        new_values, optimizer = adam_step(model.parameter_arrays(), grads, optimizer, lr)
        model.load_arrays(new_values)

        last = step == run.steps - 1
        valid_rmse = float("nan")
        if valid_set and ((step + 1) % run.validate_every == 0 or last):
            valid_rmse = evaluate(model, [v.trajectory for v in valid_set], [v.plan for v in valid_set])
            logger.info(f"step {step + 1}: validation rollout RMSE {valid_rmse:.6e}")
            if valid_rmse < best:
                best = valid_rmse
                saved_best = True
                Checkpoint.from_model(model, optimizer).save(best_path)
        if (step + 1) % run.log_every == 0 or last or not np.isnan(valid_rmse):
            rows.append(MetricRow(
                step=step + 1, train_loss=loss_value, valid_rmse=valid_rmse,
                wall_time=time.perf_counter() - start,
            ))
        if (step + 1) % run.log_every == 0:
            logger.info(f"step {step + 1}/{run.steps}: loss {loss_value:.6e}, lr {lr:.2e}")

    Checkpoint.from_model(model, optimizer).save(last_path)
    if not saved_best:
        Checkpoint.from_model(model, optimizer).save(best_path)
    write_metrics(out_dir / "metrics.csv", rows)
    logger.info(f"Finished {run.steps} steps; best validation RMSE {best:.6e}; checkpoints in {out_dir}")
    return TrainResult(model, best_path, last_path, pd.DataFrame(list(rows), columns=METRIC_COLUMNS), report, anchor)
