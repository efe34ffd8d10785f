import numpy as np
import pytest

from core.meshgraph import (
    Trajectory,
    build_hetero_graph,
    build_topology,
    load_trajectory,
    save_trajectory,
    world_edges,
)
from utils.errors import CheckpointFormatError, MeshValidationError

from .conftest import grid_mesh, make_state


def _pairs(edge_set):
    return set(zip(edge_set.senders.tolist(), edge_set.receivers.tolist()))


def test_single_triangle_graph(triangle_state):
    graph = build_hetero_graph(triangle_state, world_radius=0.05)
    np.testing.assert_allclose(graph.xe, [[1.0, 2.0, 0.0, 0.0]])
    assert graph.xm.shape == (3, 3)
    assert len(graph.edges["mm"]) == 6
    assert len(graph.edges["em"]) == 3
    assert len(graph.edges["me"]) == 3
    assert len(graph.edges["ee"]) == 0
    assert graph.num_world_edges == 0
    for edge_set in graph.edges.values():
        assert edge_set.features.shape[1] == 6


def test_undeformed_state_has_zero_displacement_features():
    rest, elements = grid_mesh(3, 2)
    graph = build_hetero_graph(make_state(rest, elements), world_radius=0.0)
    np.testing.assert_array_equal(graph.xm[:, 1:], 0)
    np.testing.assert_array_equal(graph.xe[:, 2:], 0)
    for edge_set in graph.edges.values():
        np.testing.assert_array_equal(edge_set.features[:, :3], edge_set.features[:, 3:])


def test_edge_feature_layout(float64):
    rest = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    moved = rest.copy()
    moved[1] = [3.0, 4.0]
    graph = build_hetero_graph(make_state(rest, np.array([[0, 1, 2]]), positions=moved), 0.0)
    mm = graph.edges["mm"]
    row = int(np.nonzero((mm.senders == 1) & (mm.receivers == 0))[0][0])
    np.testing.assert_allclose(mm.features[row], [1.0, 0.0, 1.0, 3.0, 4.0, 5.0])
    np.testing.assert_allclose(graph.xm[1], [0.0, 2.0, 4.0])


def _two_bodies(gap_offset: float):
    tri = np.array([[0.0, 0.0], [0.03, 0.0], [0.0, 0.03]])
    rest = np.concatenate([tri, tri + [gap_offset, 0.0]])
    elements = np.array([[0, 1, 2], [3, 4, 5]])
    return rest, elements


def test_world_edges_link_close_bodies():
    rest, elements = _two_bodies(0.04)
    state = make_state(rest, elements, node_body=np.array([0, 0, 0, 1, 1, 1]), element_body=np.array([0, 1]))
    graph = build_hetero_graph(state, world_radius=0.05)
    assert graph.num_world_edges == 2
    assert _pairs(graph.edges["ee"]) == {(0, 1), (1, 0)}
    assert build_hetero_graph(state, world_radius=0.0).num_world_edges == 0
    assert build_hetero_graph(state, world_radius=0.03).num_world_edges == 0


def test_world_edges_skip_same_body():
    centers = np.array([[0.0, 0.0], [0.01, 0.0]])
    assert len(world_edges(centers, np.array([0, 0]), 1.0)) == 0
    assert len(world_edges(centers, np.array([0, 1]), 1.0)) == 2


def test_negative_world_radius_is_rejected(triangle_state):
    with pytest.raises(MeshValidationError):
        build_hetero_graph(triangle_state, world_radius=-1.0)


def test_mesh_edges_are_symmetric_and_elements_have_one_edge_per_vertex():
    rest, elements = grid_mesh(4, 3)
    graph = build_hetero_graph(make_state(rest, elements), 0.0)
    for family in ("mm", "ee"):
        pairs = _pairs(graph.edges[family])
        assert pairs == {(b, a) for a, b in pairs}
        assert all(a != b for a, b in pairs)
    np.testing.assert_array_equal(np.bincount(graph.edges["me"].receivers), np.full(len(elements), 3))
    np.testing.assert_array_equal(graph.edges["em"].senders, graph.edges["me"].receivers)


def test_element_adjacency_uses_shared_edges():
    rest, elements = grid_mesh(1, 1)
    topology = build_topology(make_state(rest, elements))
    assert set(zip(topology.ee_senders.tolist(), topology.ee_receivers.tolist())) == {(0, 1), (1, 0)}
    assert len(topology.mm_senders) == 10


def test_degenerate_element_is_named(triangle_state):
    rest = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    state = make_state(rest, np.array([[0, 1, 3], [0, 1, 2]]))
    with pytest.raises(MeshValidationError, match="element 1"):
        build_hetero_graph(state, 0.0)


def test_vertex_index_out_of_range_is_rejected():
    rest = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(MeshValidationError, match="element 0"):
        build_hetero_graph(make_state(rest, np.array([[0, 1, 3]])), 0.0)


def test_invalid_material_is_rejected(triangle_state):
    triangle_state.mu = np.array([-1.0])
    with pytest.raises(MeshValidationError):
        triangle_state.validate()


def test_features_are_translation_invariant(float64):
    rest, elements = grid_mesh(3, 3)
    rng = np.random.default_rng(0)
    positions = rest + 0.02 * rng.standard_normal(rest.shape)
    shift = np.array([3.7, -1.2])
    a = build_hetero_graph(make_state(rest, elements, positions=positions), 0.0)
    b = build_hetero_graph(make_state(rest + shift, elements, positions=positions + shift), 0.0)
    np.testing.assert_allclose(a.xm, b.xm, atol=1e-12)
    np.testing.assert_allclose(a.xe, b.xe, atol=1e-12)
    for family in a.edges:
        np.testing.assert_allclose(a.edges[family].features, b.edges[family].features, atol=1e-12)


def test_vertex_relabeling_permutes_features():
    rest, elements = grid_mesh(3, 2)
    rng = np.random.default_rng(1)
    positions = rest + 0.01 * rng.standard_normal(rest.shape)
    new_index = rng.permutation(len(rest))
    permuted_rest = np.empty_like(rest)
    permuted_rest[new_index] = rest
    permuted_positions = np.empty_like(positions)
    permuted_positions[new_index] = positions

    a = build_hetero_graph(make_state(rest, elements, positions=positions), 0.0)
    b = build_hetero_graph(make_state(permuted_rest, new_index[elements], positions=permuted_positions), 0.0)
    np.testing.assert_array_equal(b.xm[new_index], a.xm)
    np.testing.assert_array_equal(b.xe, a.xe)
    for family in ("mm", "ee"):
        fa = a.edges[family].features
        fb = b.edges[family].features
        np.testing.assert_array_equal(fa[np.lexsort(fa.T)], fb[np.lexsort(fb.T)])


def test_trajectory_round_trip(tmp_path):
    rest, elements = grid_mesh(2, 2)
    states = [
        make_state(rest, elements, positions=rest + 0.01 * t, flags=np.eye(len(rest), dtype=np.int8)[t])
        for t in range(3)
    ]
    trajectory = Trajectory.from_states(states, metadata={"seed": 4})
    path = tmp_path / "t.sgt"
    save_trajectory(path, trajectory)
    loaded = load_trajectory(path)
    np.testing.assert_array_equal(loaded.positions, trajectory.positions)
    np.testing.assert_array_equal(loaded.boundary_flags, trajectory.boundary_flags)
    np.testing.assert_array_equal(loaded.elements, trajectory.elements)
    assert loaded.metadata == {"seed": 4}
    np.testing.assert_array_equal(loaded.state(2).rest_positions, trajectory.positions[0])


def test_trajectory_bad_magic(tmp_path):
    path = tmp_path / "junk.sgt"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointFormatError):
        load_trajectory(path)


def test_trajectory_truncated_frames(tmp_path):
    rest, elements = grid_mesh(1, 1)
    path = tmp_path / "t.sgt"
    save_trajectory(path, Trajectory.from_states([make_state(rest, elements)]))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CheckpointFormatError):
        load_trajectory(path)
