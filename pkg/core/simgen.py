# core/simgen.py
"""
Plane-strain linear FEM oracle: a plate pressed by a rigid disc, stepped
quasi-statically, written out as trajectory files plus a manifest.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from utils.constants import DEFAULT_SPLIT, MANIFEST_NAME, TRAJECTORY_SUFFIX
from utils.errors import ConfigurationError, MeshValidationError
from utils.types import DatasetManifest, ManifestEntry, ScenarioSpec
from utils.utils import make_rng

from .meshgraph import MeshState, Trajectory, save_trajectory, signed_volumes

logger = logging.getLogger(__name__)

PLATE_BODY = 0
INDENTER_BODY = 1
_FAMILY_KEYS = {"pretrain": 1, "finetune": 2}


# ===== Section: stiffness =====

def constitutive_matrix(lam: float, mu: float) -> np.ndarray:
    """Plane-strain D in Voigt order (xx, yy, xy with engineering shear)."""
    return np.array([
        [lam + 2 * mu, lam, 0.0],
        [lam, lam + 2 * mu, 0.0],
        [0.0, 0.0, mu],
    ])


def _strain_displacement(points: np.ndarray, elements: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """B matrices (m, 3, 6) and signed areas (m,) of linear triangles."""
    p = points[elements].astype(np.float64)
    x, y = p[..., 0], p[..., 1]
    area = 0.5 * ((x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0]))
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    B = np.zeros((len(elements), 3, 6))
    B[:, 0, 0::2] = b
    B[:, 1, 1::2] = c
    B[:, 2, 0::2] = c
    B[:, 2, 1::2] = b
    with np.errstate(divide="ignore", invalid="ignore"):
        B /= (2.0 * area)[:, None, None]
    return B, area


def element_stiffness(points: np.ndarray, elements: np.ndarray, lam: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Symmetrized (m, 6, 6) element matrices, dofs ordered (u1, v1, u2, v2, u3, v3)."""
    B, area = _strain_displacement(points, elements)
    inverted = area <= 0
    if inverted.any():
        bad = int(np.nonzero(inverted)[0][0])
        raise MeshValidationError(f"inverted element {bad}: signed area {area[bad]:.3e}")
    D = np.stack([constitutive_matrix(l, m) for l, m in zip(np.atleast_1d(lam), np.atleast_1d(mu))])
    K = area[:, None, None] * np.einsum("eki,ekl,elj->eij", B, D, B)
    return 0.5 * (K + np.transpose(K, (0, 2, 1)))


def assemble_stiffness(points: np.ndarray, elements: np.ndarray, lam: np.ndarray, mu: np.ndarray) -> sp.csr_matrix:
    """Global (2n, 2n) stiffness; exactly symmetric."""
    n = points.shape[0]
    Ke = element_stiffness(points, elements, lam, mu)
    dofs = np.stack([2 * elements, 2 * elements + 1], axis=2).reshape(len(elements), 6)
    rows = np.repeat(dofs, 6, axis=1).reshape(-1)
    cols = np.tile(dofs, (1, 6)).reshape(-1)
    K = sp.coo_matrix((Ke.reshape(-1), (rows, cols)), shape=(2 * n, 2 * n)).tocsr()
    return ((K + K.T) * 0.5).tocsr()


def solve_displacement(
    points: np.ndarray,
    elements: np.ndarray,
    lam: np.ndarray,
    mu: np.ndarray,
    fixed_dofs: np.ndarray,
    fixed_values: np.ndarray,
    K: Optional[sp.csr_matrix] = None,
) -> np.ndarray:
    """
    Solve K u = 0 for the free dofs given prescribed dof values.

    Returns:
        (n, 2) displacement
    """
    n = points.shape[0]
    if K is None:
        K = assemble_stiffness(points, elements, lam, mu)
    u = np.zeros(2 * n)
    fixed_dofs = np.asarray(fixed_dofs, dtype=np.int64)
    u[fixed_dofs] = fixed_values
    free = np.setdiff1d(np.arange(2 * n), fixed_dofs)
    if free.size and np.any(u[fixed_dofs] != 0):
        K_ff = K[free][:, free].tocsc()
        rhs = -(K[free][:, fixed_dofs] @ u[fixed_dofs])
        u[free] = spsolve(K_ff, rhs)
    return u.reshape(n, 2)


# ===== Section: scenario meshes =====

def plate_mesh(spec: ScenarioSpec) -> Tuple[np.ndarray, np.ndarray]:
    """(nx+1)(ny+1) grid vertices split into counter-clockwise triangles."""
    xs = np.linspace(0.0, spec.width, spec.nx + 1)
    ys = np.linspace(0.0, spec.height, spec.ny + 1)
    gx, gy = np.meshgrid(xs, ys)
    points = np.stack([gx.ravel(), gy.ravel()], axis=1)
    idx = np.arange((spec.nx + 1) * (spec.ny + 1)).reshape(spec.ny + 1, spec.nx + 1)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, 1:].ravel(), idx[1:, :-1].ravel()
    elements = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)], axis=0)
    return points, elements


def indenter_mesh(center: Sequence[float], radius: float, segments: int) -> Tuple[np.ndarray, np.ndarray]:
    """Center vertex first, then the rim; fan triangles."""
    angles = 2 * np.pi * np.arange(segments) / segments
    rim = np.asarray(center) + radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    points = np.concatenate([np.asarray(center, dtype=np.float64)[None, :], rim], axis=0)
    k = np.arange(segments)
    elements = np.stack([np.zeros(segments, dtype=np.int64), 1 + k, 1 + (k + 1) % segments], axis=1)
    return points, elements


def indenter_path(spec: ScenarioSpec) -> np.ndarray:
    """(steps, 2) disc centers, linear from start to end."""
    frac = np.linspace(0.0, 1.0, spec.steps)[:, None]
    start, end = np.asarray(spec.indenter_start), np.asarray(spec.indenter_end)
    return start + frac * (end - start)


def initial_state(spec: ScenarioSpec) -> MeshState:
    plate_pts, plate_els = plate_mesh(spec)
    disc_pts, disc_els = indenter_mesh(spec.indenter_start, spec.indenter_radius, spec.indenter_segments)
    n_plate, m_plate = len(plate_pts), len(plate_els)
    points = np.concatenate([plate_pts, disc_pts], axis=0)
    elements = np.concatenate([plate_els, disc_els + n_plate], axis=0).astype(np.int64)
    m_disc = len(disc_els)
    node_body = np.concatenate([np.full(n_plate, PLATE_BODY), np.full(len(disc_pts), INDENTER_BODY)])
    flags = np.zeros(len(points), dtype=np.int8)
    flags[:n_plate][plate_pts[:, 1] <= 0.0] = 1
    flags[n_plate:] = 1
    return MeshState(
        dim=2,
        positions=points,
        rest_positions=points.copy(),
        elements=elements,
        lam=np.concatenate([np.full(m_plate, spec.lam), np.zeros(m_disc)]),
        mu=np.concatenate([np.full(m_plate, spec.mu), np.zeros(m_disc)]),
        boundary_flag=flags,
        node_body=node_body.astype(np.int64),
        element_body=np.concatenate([np.full(m_plate, PLATE_BODY), np.full(m_disc, INDENTER_BODY)]).astype(np.int64),
    )


# ===== Section: stepping =====

def solve_step(prev: MeshState, center: Sequence[float], next_center: Sequence[float], radius: float) -> MeshState:
    """
    Move the disc from ``center`` to ``next_center`` and re-equilibrate the plate.

    Plate vertices inside the disc are projected onto its rim, the plate's
    bottom edge stays fixed, and all other plate displacements solve the
    linear system assembled on the current configuration.
    """
    center, next_center = np.asarray(center, dtype=np.float64), np.asarray(next_center, dtype=np.float64)
    positions = prev.positions.astype(np.float64).copy()
    plate = prev.node_body == PLATE_BODY
    positions[~plate] += next_center - center

    bottom = plate & (prev.rest_positions[:, 1] <= prev.rest_positions[plate, 1].min())
    offset = positions - next_center
    dist = np.linalg.norm(offset, axis=1)
    contact = plate & ~bottom & (dist < radius)

    flags = np.zeros(prev.num_nodes, dtype=np.int8)
    flags[~plate | bottom | contact] = 1
    if not contact.any():
        return prev.with_positions(positions, flags)

    plate_nodes = np.nonzero(plate)[0]
    local = -np.ones(prev.num_nodes, dtype=np.int64)
    local[plate_nodes] = np.arange(len(plate_nodes))
    plate_elems = prev.element_body == PLATE_BODY
    elements = local[prev.elements[plate_elems]]

    target = next_center + radius * offset[contact] / np.maximum(dist[contact], 1e-12)[:, None]
    fixed_nodes = np.concatenate([local[np.nonzero(bottom)[0]], local[np.nonzero(contact)[0]]])
    fixed_disp = np.concatenate([np.zeros((bottom.sum(), 2)), target - positions[contact]])
    fixed_dofs = np.stack([2 * fixed_nodes, 2 * fixed_nodes + 1], axis=1).reshape(-1)

    du = solve_displacement(
        positions[plate_nodes], elements, prev.lam[plate_elems], prev.mu[plate_elems],
        fixed_dofs, fixed_disp.reshape(-1),
    )
    positions[plate_nodes] += du
    return prev.with_positions(positions, flags)


def simulate_scenario(spec: ScenarioSpec) -> Trajectory:
    """Run one scenario; every step is checked for inverted plate elements."""
    state = initial_state(spec)
    path = indenter_path(spec)
    states = [state]
    plate_elems = state.element_body == PLATE_BODY
    for t in range(1, spec.steps):
        state = solve_step(state, path[t - 1], path[t], spec.indenter_radius)
        areas = signed_volumes(state.positions, state.elements[plate_elems])
        if (areas <= 0).any():
            bad = int(np.nonzero(areas <= 0)[0][0])
            raise MeshValidationError(f"element {bad} inverted at step {t} of scenario seed {spec.seed}")
        states.append(state)
    return Trajectory.from_states(states, metadata={"scenario": spec.model_dump(mode="json")})


def sample_scenarios(family: str, count: int, seed: int) -> List[ScenarioSpec]:
    """
    Draw scenarios of a named family.

    ``pretrain`` varies plate height, material, disc radius and path;
    ``finetune`` fixes the plate and uses larger discs pressed straight down.
    """
    if family not in _FAMILY_KEYS:
        raise ConfigurationError(f"Unknown scenario family: {family}. Use one of {sorted(_FAMILY_KEYS)}")
    rng = make_rng(seed, _FAMILY_KEYS[family])
    specs = []
    for _ in range(count):
        if family == "pretrain":
            height = float(rng.uniform(0.3, 1.0))
            radius = float(rng.uniform(0.08, 0.15))
            mu = float(rng.uniform(30.0, 80.0))
            lam = float(rng.uniform(1.0, 3.0)) * mu
            x0 = float(rng.uniform(0.3, 0.7))
            x1 = x0 + float(rng.uniform(-0.1, 0.1))
        else:
            height, radius, lam, mu = 0.5, float(rng.uniform(0.18, 0.24)), 100.0, 50.0
            x0 = x1 = float(rng.uniform(0.4, 0.6))
        gap = float(rng.uniform(0.005, 0.02))
        depth = float(rng.uniform(0.03, 0.07))
        specs.append(ScenarioSpec(
            family=family,
            nx=16,
            ny=max(2, int(round(16 * height))),
            width=1.0,
            height=height,
            lam=lam,
            mu=mu,
            indenter_radius=radius,
            indenter_start=(x0, height + radius + gap),
            indenter_end=(x1, height + radius - depth),
            steps=20,
            seed=int(rng.integers(0, 2**31 - 1)),
        ))
    return specs


# ===== Section: datasets =====

def split_assignment(count: int, ratios: Tuple[int, int, int], seed: int) -> List[str]:
    """Seeded split labels; valid and test get at least one entry once count >= 3."""
    total = sum(ratios)
    n_valid = count * ratios[1] // total
    n_test = count * ratios[2] // total
    if count >= 3:
        n_valid = max(n_valid, 1 if ratios[1] else 0)
        n_test = max(n_test, 1 if ratios[2] else 0)
    labels = ["train"] * (count - n_valid - n_test) + ["valid"] * n_valid + ["test"] * n_test
    order = make_rng(seed).permutation(count)
    out = [""] * count
    for label, index in zip(labels, order):
        out[index] = label
    return out


def _generate_one(args: Tuple[int, ScenarioSpec, str, str]) -> Dict:
    index, spec, out_dir, split = args
    trajectory = simulate_scenario(spec)
    name = f"traj_{index:05d}{TRAJECTORY_SUFFIX}"
    save_trajectory(Path(out_dir) / name, trajectory)
    return ManifestEntry(
        file=name, seed=spec.seed, split=split, family=spec.family,
        steps=len(trajectory), num_vertices=trajectory.num_nodes, scenario=spec,
    ).model_dump(mode="json")


def generate_dataset(
    specs: Sequence[ScenarioSpec],
    out_dir: Union[str, Path],
    split_ratios: Tuple[int, int, int] = DEFAULT_SPLIT,
    workers: int = 1,
    seed: int = 0,
) -> DatasetManifest:
    """
    Simulate every scenario into ``out_dir`` and write the manifest.

    Args:
        specs: Scenarios to simulate
        out_dir: Destination directory (created)
        split_ratios: train/valid/test proportions
        workers: Worker processes (1 runs in-process)
        seed: Seed of the split assignment

    Returns:
        The written DatasetManifest
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = split_assignment(len(specs), split_ratios, seed)
    jobs = [(i, spec, str(out_dir), splits[i]) for i, spec in enumerate(specs)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_generate_one, jobs))
    else:
        results = [_generate_one(job) for job in jobs]
    for entry in results:
        logger.info(f"Generated {entry['file']} ({entry['split']}, {entry['num_vertices']} vertices)")
    manifest = DatasetManifest(split_ratios=tuple(split_ratios), entries=[ManifestEntry(**r) for r in results])
    (out_dir / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2))
    logger.info(f"Wrote {len(results)} trajectories to {out_dir}")
    return manifest


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    """Read a manifest; accepts the file or the dataset directory."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        return DatasetManifest.model_validate_json(path.read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"Dataset manifest not found: {path}")
