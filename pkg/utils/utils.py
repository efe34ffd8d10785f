"""
Common utility functions for the simulator.
"""

import json
import logging
import math
import time
from contextlib import contextmanager
from typing import Any, Iterator

import numpy as np

logger = logging.getLogger(__name__)


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """
    Create an independent generator for a (seed, key...) pair.

    Args:
        seed: Base seed of the run
        keys: Extra integers that separate streams (step, trajectory, ...)

    Returns:
        numpy Generator
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def exponential_lr(step: int, total_steps: int, lr: float, lr_final: float) -> float:
    """Exponential decay from lr to lr_final over total_steps."""
    if total_steps <= 1:
        return lr
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return lr * (lr_final / lr) ** frac


def canonical_json(payload: Any) -> bytes:
    """Deterministic UTF-8 JSON used inside binary headers."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")


def fraction_count(total: int, fraction: float) -> int:
    """Number of items kept when subsampling a fraction (at least one)."""
    return max(1, min(total, math.ceil(fraction * total)))


def format_count(count: int) -> str:
    """Format a parameter count in human-readable form."""
    for unit in ["", "K", "M"]:
        if abs(count) < 1000:
            return f"{count:.1f}{unit}" if unit else str(count)
        count /= 1000
    return f"{count:.1f}G"


@contextmanager
def log_duration(label: str) -> Iterator[None]:
    """Log the wall time of a block at INFO."""
    start = time.perf_counter()
    yield
    logger.info(f"{label} took {time.perf_counter() - start:.2f}s")
