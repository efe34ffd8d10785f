import numpy as np
import pytest

from core.meshgraph import load_trajectory, signed_volumes
from core.simgen import (
    INDENTER_BODY,
    PLATE_BODY,
    _strain_displacement,
    assemble_stiffness,
    element_stiffness,
    generate_dataset,
    indenter_path,
    initial_state,
    load_manifest,
    plate_mesh,
    sample_scenarios,
    simulate_scenario,
    solve_displacement,
    solve_step,
    split_assignment,
)
from utils.errors import ConfigurationError, MeshValidationError
from utils.types import ScenarioSpec

UNIT_TRIANGLE = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])

SMALL = ScenarioSpec(
    nx=4, ny=2, width=1.0, height=0.5, lam=100.0, mu=50.0,
    indenter_radius=0.15, indenter_start=(0.5, 0.66), indenter_end=(0.5, 0.60),
    indenter_segments=8, steps=4, seed=11,
)


def _plate(nx: int = 3, ny: int = 2, height: float = 0.5):
    spec = ScenarioSpec(nx=nx, ny=ny, height=height)
    points, elements = plate_mesh(spec)
    m = len(elements)
    return points, elements, np.full(m, 2.0), np.full(m, 1.0)


def test_unit_triangle_stiffness_by_hand():
    K = element_stiffness(UNIT_TRIANGLE, np.array([[0, 1, 2]]), np.array([0.0]), np.array([1.0]))[0]
    expected = 0.5 * np.array([
        [3, 1, -2, -1, -1, 0],
        [1, 3, 0, -1, -1, -2],
        [-2, 0, 2, 0, 0, 0],
        [-1, -1, 0, 1, 1, 0],
        [-1, -1, 0, 1, 1, 0],
        [0, -2, 0, 0, 0, 2],
    ], dtype=np.float64)
    np.testing.assert_allclose(K, expected, atol=1e-14)


def test_inverted_element_is_rejected():
    with pytest.raises(MeshValidationError, match="inverted element 0"):
        element_stiffness(UNIT_TRIANGLE, np.array([[0, 2, 1]]), np.array([1.0]), np.array([1.0]))


def test_stiffness_is_exactly_symmetric():
    K = assemble_stiffness(*_plate())
    assert abs(K - K.T).max() == 0


def test_rigid_motions_are_in_the_null_space():
    points, elements, lam, mu = _plate()
    K = assemble_stiffness(points, elements, lam, mu)
    scale = abs(K).max()
    modes = [
        np.tile([1.0, 0.0], len(points)),
        np.tile([0.0, 1.0], len(points)),
        np.stack([-points[:, 1], points[:, 0]], axis=1).reshape(-1),
    ]
    for mode in modes:
        assert np.abs(K @ mode).max() < 1e-10 * scale


def test_null_space_has_dimension_three():
    K = assemble_stiffness(*_plate()).toarray()
    eig = np.linalg.eigvalsh(K)
    assert int((np.abs(eig) < 1e-10 * eig.max()).sum()) == 3


def _compression(lam: np.ndarray, mu: np.ndarray, points, elements, delta: float, height: float):
    bottom = np.nonzero(points[:, 1] == 0.0)[0]
    top = np.nonzero(np.isclose(points[:, 1], height))[0]
    dofs = np.concatenate([2 * bottom + 1, [0], 2 * top + 1])
    values = np.concatenate([np.zeros(len(bottom)), [0.0], np.full(len(top), -delta)])
    return solve_displacement(points, elements, lam, mu, dofs, values)


def test_uniform_compression_patch():
    points, elements, lam, mu = _plate(nx=4, ny=4, height=0.5)
    u = _compression(lam, mu, points, elements, delta=0.01, height=0.5)
    B, _ = _strain_displacement(points, elements)
    strain = np.einsum("eij,ej->ei", B, u[elements].reshape(len(elements), 6))
    np.testing.assert_allclose(strain[:, 1], -0.02, atol=1e-6)
    np.testing.assert_allclose(strain[:, 0], 0.02 * 2.0 / (2.0 + 2.0), atol=1e-6)
    np.testing.assert_allclose(strain[:, 2], 0.0, atol=1e-6)


def test_scaling_the_material_keeps_dirichlet_solutions():
    points, elements, lam, mu = _plate(nx=4, ny=4, height=0.5)
    a = _compression(lam, mu, points, elements, 0.01, 0.5)
    b = _compression(2 * lam, 2 * mu, points, elements, 0.01, 0.5)
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_zero_prescribed_values_give_zero_displacement():
    points, elements, lam, mu = _plate()
    u = solve_displacement(points, elements, lam, mu, np.array([0, 1, 3]), np.zeros(3))
    np.testing.assert_array_equal(u, 0)


def test_initial_state_layout():
    state = initial_state(SMALL)
    n_plate = (SMALL.nx + 1) * (SMALL.ny + 1)
    assert state.num_nodes == n_plate + 1 + SMALL.indenter_segments
    assert (state.node_body[:n_plate] == PLATE_BODY).all()
    assert (state.node_body[n_plate:] == INDENTER_BODY).all()
    disc = state.element_body == INDENTER_BODY
    assert (state.lam[disc] == 0).all() and (state.mu[disc] == 0).all()
    np.testing.assert_array_equal(state.boundary_flag[:SMALL.nx + 1], 1)
    np.testing.assert_array_equal(state.boundary_flag[n_plate:], 1)
    assert (signed_volumes(state.positions, state.elements) > 0).all()
    state.validate()


def test_step_without_contact_keeps_the_plate():
    spec = SMALL.model_copy(update={"indenter_start": (0.5, 5.0), "indenter_end": (0.5, 5.0)})
    state = initial_state(spec)
    nxt = solve_step(state, (0.5, 5.0), (0.5, 5.0), spec.indenter_radius)
    np.testing.assert_array_equal(nxt.positions, state.positions)
    np.testing.assert_array_equal(nxt.boundary_flag, state.boundary_flag)


def test_simulated_contact_follows_the_indenter():
    trajectory = simulate_scenario(SMALL)
    path = indenter_path(SMALL)
    n_plate = (SMALL.nx + 1) * (SMALL.ny + 1)
    assert len(trajectory) == SMALL.steps
    for t in range(len(trajectory)):
        positions = trajectory.positions[t].astype(np.float64)
        np.testing.assert_allclose(positions[n_plate], path[t], atol=1e-6)
        plate_el = trajectory.element_body == PLATE_BODY
        assert (signed_volumes(positions, trajectory.elements[plate_el]) > 0).all()
        np.testing.assert_array_equal(positions[:SMALL.nx + 1], trajectory.positions[0][:SMALL.nx + 1])
    contacts = 0
    for t in range(1, len(trajectory)):
        positions = trajectory.positions[t].astype(np.float64)
        rest = trajectory.positions[0]
        touching = np.nonzero(
            (trajectory.boundary_flags[t] == 1) & (trajectory.node_body == PLATE_BODY) & (rest[:, 1] > 0)
        )[0]
        contacts += len(touching)
        dist = np.linalg.norm(positions[touching] - path[t], axis=1)
        np.testing.assert_allclose(dist, SMALL.indenter_radius, atol=1e-5)
    assert contacts > 0


def test_sample_scenarios_is_deterministic_and_in_range():
    a = sample_scenarios("pretrain", 5, seed=3)
    assert a == sample_scenarios("pretrain", 5, seed=3)
    assert a != sample_scenarios("pretrain", 5, seed=4)
    for spec in a:
        assert 0.08 <= spec.indenter_radius <= 0.15
        assert 30.0 <= spec.mu <= 80.0
        assert spec.mu <= spec.lam <= 3 * spec.mu
    for spec in sample_scenarios("finetune", 5, seed=3):
        assert spec.indenter_start[0] == spec.indenter_end[0]
        assert (spec.lam, spec.mu, spec.height) == (100.0, 50.0, 0.5)
        assert 0.18 <= spec.indenter_radius <= 0.24


def test_unknown_family():
    with pytest.raises(ConfigurationError, match="Unknown scenario family"):
        sample_scenarios("sideways", 1, 0)


def test_split_assignment_counts():
    labels = split_assignment(5, (1000, 100, 100), seed=0)
    assert sorted(labels) == ["test", "train", "train", "train", "valid"]
    assert split_assignment(5, (1000, 100, 100), seed=0) == labels
    assert split_assignment(2, (1000, 100, 100), seed=0) == ["train", "train"]
    assert sorted(split_assignment(12, (10, 1, 1), seed=1)).count("train") == 10


def _small_specs():
    return [SMALL, SMALL.model_copy(update={"seed": 12, "indenter_end": (0.45, 0.61)}),
            SMALL.model_copy(update={"seed": 13, "lam": 50.0})]


def test_generate_dataset_is_reproducible(tmp_path):
    specs = _small_specs()
    a = generate_dataset(specs, tmp_path / "a", split_ratios=(1, 1, 1), seed=5)
    generate_dataset(specs, tmp_path / "b", split_ratios=(1, 1, 1), seed=5)
    assert sorted(entry.split for entry in a.entries) == ["test", "train", "valid"]
    for entry in a.entries:
        assert (tmp_path / "a" / entry.file).read_bytes() == (tmp_path / "b" / entry.file).read_bytes()
    manifest = load_manifest(tmp_path / "a")
    assert [e.file for e in manifest.entries] == [e.file for e in a.entries]
    loaded = load_trajectory(tmp_path / "a" / a.entries[0].file)
    np.testing.assert_array_equal(loaded.positions, simulate_scenario(specs[0]).positions)


def test_generate_dataset_with_workers_matches_serial(tmp_path):
    specs = _small_specs()
    serial = generate_dataset(specs, tmp_path / "serial", split_ratios=(1, 1, 1))
    generate_dataset(specs, tmp_path / "pool", split_ratios=(1, 1, 1), workers=2)
    for entry in serial.entries:
        assert (tmp_path / "serial" / entry.file).read_bytes() == (tmp_path / "pool" / entry.file).read_bytes()


def test_missing_manifest(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        load_manifest(tmp_path)
