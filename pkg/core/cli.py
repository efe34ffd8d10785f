# core/cli.py
"""Command-line surface: dataset generation, training, transplant, rollout and evaluation."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import ValidationError

from utils.errors import ConfigurationError, SgunetError
from utils.logging_config import setup_logging
from utils.plotting import save_rollout_figure
from utils.types import ExperimentSettings, Strategy
from utils.utils import format_count

from .config import Config, _read_json, load_model_config, load_run_config, parse_model_overrides
from .experiment import run_transfer_experiment
from .meshgraph import load_trajectory
from .sgunet import count_parameters
from .simgen import generate_dataset, load_manifest, sample_scenarios
from .tensorcore import set_default_dtype
from .trainer import evaluate, position_rmse, rollout, train
from .transfer import Checkpoint, transplant

logger = logging.getLogger(__name__)

_STRATEGIES = [s.value for s in Strategy]


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--manifest", type=Path, help="Dataset manifest (or dataset directory)")
    p.add_argument("--out", dest="out_dir", type=Path, help="Output directory")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--validate-every", dest="validate_every", type=int)
    p.add_argument(
        "--set", dest="model_overrides", action="append", metavar="KEY=VALUE",
        help="Override a model config field, e.g. --set latent=64 --set pooling_ratios=[4,2]",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgunet", description="Graph U-net mesh simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="Generate FEM trajectories")
    gen.add_argument("--family", choices=["pretrain", "finetune"], default="pretrain")
    gen.add_argument("--count", type=int, default=10)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--workers", type=int, help="Worker processes (default from SGUNET_WORKERS)")

    pre = sub.add_parser("pretrain", help="Train from scratch")
    _add_train_flags(pre)

    fin = sub.add_parser("finetune", help="Transplant a checkpoint and fine-tune")
    _add_train_flags(fin)
    fin.add_argument("--source", dest="source_checkpoint", type=Path, required=True)
    fin.add_argument("--strategy", choices=_STRATEGIES)
    fin.add_argument("--fraction", dest="data_fraction", type=float)
    fin.add_argument("--lambda", dest="lambda_reg", type=float)

    tr = sub.add_parser("transplant", help="Map a checkpoint onto another config")
    tr.add_argument("--source", type=Path, required=True)
    tr.add_argument("--config", type=Path, required=True, help="Target model config (JSON)")
    tr.add_argument("--strategy", choices=_STRATEGIES, default=Strategy.UNIFORM.value)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--out", type=Path, required=True)
    tr.add_argument("--report", type=Path, help="Transfer report path (default: <out>.report.json)")

    ro = sub.add_parser("rollout", help="Roll a checkpoint out on one trajectory")
    ro.add_argument("--checkpoint", type=Path, required=True)
    ro.add_argument("--trajectory", type=Path, required=True)
    ro.add_argument("--out", type=Path, required=True, help="Predicted positions (.npy)")

    ev = sub.add_parser("eval", help="Rollout RMSE over a dataset split")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--manifest", type=Path, required=True)
    ev.add_argument("--split", choices=["train", "valid", "test"], default="test")
    ev.add_argument("--plot", type=Path, help="Write an HTML figure of the first trajectory's last step")

    ex = sub.add_parser("experiment", help="Scaled transfer experiment")
    ex.add_argument("--settings", type=Path, help="JSON experiment settings")
    ex.add_argument("--out", dest="out_dir", type=Path)
    return parser


def _overrides(args: argparse.Namespace, keys: List[str]) -> Dict[str, Any]:
    return {key: getattr(args, key, None) for key in keys}


_TRAIN_KEYS = ["manifest", "out_dir", "steps", "batch_size", "lr", "seed", "validate_every"]


def cmd_gen(args: argparse.Namespace, config: Config) -> int:
    specs = sample_scenarios(args.family, args.count, args.seed)
    manifest = generate_dataset(specs, args.out, workers=args.workers or config.workers, seed=args.seed)
    print(json.dumps({"out": str(args.out), "trajectories": len(manifest.entries)}))
    return 0


def cmd_train(args: argparse.Namespace, config: Config, finetune: bool) -> int:
    keys = _TRAIN_KEYS + (["source_checkpoint", "strategy", "data_fraction", "lambda_reg"] if finetune else [])
    overrides = _overrides(args, keys)
    overrides.update(parse_model_overrides(args.model_overrides))
    run = load_run_config(args.config, overrides)
    logger.info(f"Model has {format_count(count_parameters(run.config))} parameters")
    result = train(run)
    print(json.dumps({"best": str(result.best_path), "last": str(result.last_path)}))
    return 0


def cmd_transplant(args: argparse.Namespace, config: Config) -> int:
    source = Checkpoint.load(args.source)
    ckpt, report = transplant(source, load_model_config(args.config), Strategy(args.strategy), args.seed)
    ckpt.save(args.out)
    report_path = args.report or args.out.with_suffix(".report.json")
    report_path.write_text(report.model_dump_json(indent=2))
    print(json.dumps({"checkpoint": str(args.out), "report": str(report_path), **report.counts()}))
    return 0


def cmd_rollout(args: argparse.Namespace, config: Config) -> int:
    model = Checkpoint.load(args.checkpoint).to_model()
    trajectory = load_trajectory(args.trajectory)
    pred = rollout(model, trajectory)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    np.save(args.out, pred)
    rmse = position_rmse(pred, trajectory.positions[1:], trajectory.boundary_flags[1:] == 0)
    print(json.dumps({"steps": int(pred.shape[0]), "rmse": rmse}))
    return 0


def cmd_eval(args: argparse.Namespace, config: Config) -> int:
    model = Checkpoint.load(args.checkpoint).to_model()
    manifest_path = Path(args.manifest)
    data_dir = manifest_path if manifest_path.is_dir() else manifest_path.parent
    files = load_manifest(manifest_path).files(args.split)
    trajectories = [load_trajectory(data_dir / name) for name in files]
    rmse = evaluate(model, trajectories)
    if args.plot and trajectories:
        first = trajectories[0]
        pred = rollout(model, first)
        plate = first.element_body == 0
        save_rollout_figure(
            args.plot, first.elements[plate], first.positions[-1], pred[-1],
            title=f"{files[0]}: step {len(first) - 1}",
        )
    print(json.dumps({"split": args.split, "trajectories": len(trajectories), "rmse": rmse}))
    return 0


def cmd_experiment(args: argparse.Namespace, config: Config) -> int:
    payload = _read_json(args.settings) if args.settings else {}
    if args.out_dir:
        payload["out_dir"] = str(args.out_dir)
    try:
        settings = ExperimentSettings(**payload)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid experiment settings: {e}")
    result = run_transfer_experiment(settings)
    print(result.summary.to_string(index=False))
    return 0 if result.accepted else 1


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = Config()
        for package in ("core", "utils"):
            setup_logging(package, log_dir=config.log_dir, level=config.log_level, to_file=config.log_to_file)
        set_default_dtype(config.dtype)
        handlers = {
            "gen": cmd_gen,
            "pretrain": lambda a, c: cmd_train(a, c, finetune=False),
            "finetune": lambda a, c: cmd_train(a, c, finetune=True),
            "transplant": cmd_transplant,
            "rollout": cmd_rollout,
            "eval": cmd_eval,
            "experiment": cmd_experiment,
        }
        return handlers[args.command](args, config)
    except SgunetError as e:
        logger.error(f"error[{e.category}]: {e}")
        print(f"error[{e.category}]: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception(f"error[internal]: {e}")
        print(f"error[internal]: {e}", file=sys.stderr)
        return 1
