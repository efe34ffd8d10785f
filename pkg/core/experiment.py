# core/experiment.py
"""Scaled transfer experiment: pre-train broadly, then fine-tune with and without the transplant."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List

import pandas as pd

from utils.constants import MANIFEST_NAME
from utils.types import ExperimentSettings, Strategy, TrainRun
from utils.utils import log_duration

from .meshgraph import load_trajectory
from .simgen import generate_dataset, load_manifest, sample_scenarios
from .trainer import evaluate, train
from .transfer import Checkpoint

logger = logging.getLogger(__name__)

ARMS = ("transfer", "scratch")


@dataclass
class ExperimentResult:
    table: pd.DataFrame
    summary: pd.DataFrame
    accepted: bool


def run_transfer_experiment(settings: ExperimentSettings) -> ExperimentResult:
    """
    Pre-train on the broad scenario family, then fine-tune on a fraction of
    the shifted family once per seed and arm, scoring test rollouts.

    The experiment passes when the median fine-tuned RMSE does not exceed
    the median from-scratch RMSE.
    """
    out = Path(settings.out_dir)
    pre_dir, ft_dir = out / "data_pretrain", out / "data_finetune"
    with log_duration("Dataset generation"):
        generate_dataset(sample_scenarios("pretrain", settings.pretrain_trajectories, 0), pre_dir, workers=settings.workers)
        generate_dataset(sample_scenarios("finetune", settings.finetune_trajectories, 1), ft_dir, workers=settings.workers)

    with log_duration("Pre-training"):
        pretrained = train(TrainRun(
            config=settings.config,
            manifest=pre_dir / MANIFEST_NAME,
            out_dir=out / "pretrain",
            steps=settings.pretrain_steps,
            seed=0,
        ))

    manifest = load_manifest(ft_dir)
    tests = [load_trajectory(ft_dir / name) for name in manifest.files("test")]
    rows: List[dict] = []
    for seed in settings.seeds:
        for arm in ARMS:
            transfer = arm == "transfer"
            run = TrainRun(
                config=settings.config,
                manifest=ft_dir / MANIFEST_NAME,
                out_dir=out / f"{arm}_seed{seed}",
                steps=settings.finetune_steps,
                seed=seed,
                data_fraction=settings.fraction,
                lambda_reg=settings.lambda_reg if transfer else 0.0,
                source_checkpoint=pretrained.best_path if transfer else None,
                strategy=Strategy.UNIFORM,
            )
            result = train(run)
            model = Checkpoint.load(result.best_path).to_model()
            rmse = evaluate(model, tests)
            logger.info(f"{arm} seed {seed}: test rollout RMSE {rmse:.6e}")
            rows.append({"arm": arm, "seed": seed, "test_rmse": rmse})

    table = pd.DataFrame(rows)
    summary = table.groupby("arm")["test_rmse"].agg(["median", "mean", "min", "max"]).reset_index()
    medians = summary.set_index("arm")["median"]
    accepted = bool(medians["transfer"] <= medians["scratch"])
    table.to_csv(out / "experiment.csv", index=False)
    summary.to_csv(out / "experiment_summary.csv", index=False)
    logger.info(
        f"Median test RMSE: transfer {medians['transfer']:.6e}, scratch {medians['scratch']:.6e} "
        f"({'accepted' if accepted else 'rejected'})"
    )
    return ExperimentResult(table, summary, accepted)
