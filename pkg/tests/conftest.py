"""Shared fixtures: tiny meshes, float64 precision, finite differences."""

from typing import Callable, Optional, Tuple

import numpy as np
import pytest

from core.meshgraph import MeshState
from core.tensorcore import get_default_dtype, set_default_dtype


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def float64():
    previous = get_default_dtype()
    set_default_dtype(np.float64)
    yield
    set_default_dtype(previous)


def grid_mesh(nx: int, ny: int, width: float = 1.0, height: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """(nx+1)(ny+1) vertices, 2 nx ny counter-clockwise triangles."""
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    gx, gy = np.meshgrid(xs, ys)
    points = np.stack([gx.ravel(), gy.ravel()], axis=1)
    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, 1:].ravel(), idx[1:, :-1].ravel()
    elements = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)], axis=0)
    return points, elements


def make_state(
    rest: np.ndarray,
    elements: np.ndarray,
    positions: Optional[np.ndarray] = None,
    lam: float = 1.0,
    mu: float = 2.0,
    flags: Optional[np.ndarray] = None,
    node_body: Optional[np.ndarray] = None,
    element_body: Optional[np.ndarray] = None,
) -> MeshState:
    n, m = len(rest), len(elements)
    return MeshState(
        dim=rest.shape[1],
        positions=rest.copy() if positions is None else positions,
        rest_positions=rest,
        elements=np.asarray(elements, dtype=np.int64),
        lam=np.full(m, lam),
        mu=np.full(m, mu),
        boundary_flag=np.zeros(n, dtype=np.int8) if flags is None else flags.astype(np.int8),
        node_body=np.zeros(n, dtype=np.int64) if node_body is None else node_body,
        element_body=np.zeros(m, dtype=np.int64) if element_body is None else element_body,
    )


@pytest.fixture
def triangle_state() -> MeshState:
    rest = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    return make_state(rest, np.array([[0, 1, 2]]), lam=1.0, mu=2.0)


@pytest.fixture
def strip_state() -> MeshState:
    """Ten-element strip, slightly deformed, vertex 0 prescribed."""
    rest, elements = grid_mesh(5, 1, width=1.0, height=0.2)
    rng = np.random.default_rng(3)
    positions = rest + 0.01 * rng.standard_normal(rest.shape)
    flags = np.zeros(len(rest), dtype=np.int8)
    flags[0] = 1
    return make_state(rest, elements, positions=positions, lam=3.0, mu=1.5, flags=flags)


def central_difference(f: Callable[[], float], array: np.ndarray, index: Tuple[int, ...], h: float = 1e-6) -> float:
    """d f / d array[index] by central differences; restores the entry."""
    original = array[index].copy()
    array[index] = original + h
    plus = f()
    array[index] = original - h
    minus = f()
    array[index] = original
    return (plus - minus) / (2 * h)
