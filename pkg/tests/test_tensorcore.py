import numpy as np
import pytest

from core.tensorcore import (
    AdamState,
    MlpParams,
    RunningNormalizer,
    Tensor,
    adam_step,
    concat,
    gather,
    init_mlp,
    layer_norm,
    matmul,
    mean_all,
    mlp_forward,
    mul,
    normalizer_apply,
    normalizer_update,
    parameter,
    relu,
    segment_mean,
    segment_sum,
    set_default_dtype,
    square,
    sum_all,
)
from utils.errors import ConfigurationError, StructuralError

from .conftest import central_difference


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return sum_all(mul(out, Tensor(weights)))


def test_single_linear_layer():
    params = MlpParams([parameter([[2.0]])], [parameter([1.0])])
    out = mlp_forward(params, np.array([[3.0]]))
    np.testing.assert_allclose(out.data, [[7.0]])


def test_residual_mlp_with_zero_weights_is_identity():
    params = init_mlp([3, 5, 3], np.random.default_rng(0), layer_norm=False, residual=True)
    for w, b in zip(params.weights, params.biases):
        w.data[:] = 0
        b.data[:] = 0
    x = np.random.default_rng(1).standard_normal((4, 3)).astype(np.float32)
    np.testing.assert_array_equal(mlp_forward(params, x).data, x)


def test_residual_needs_equal_widths():
    with pytest.raises(ConfigurationError):
        init_mlp([3, 4], np.random.default_rng(0), residual=True)


def test_width_mismatch_is_rejected():
    params = init_mlp([3, 4], np.random.default_rng(0))
    with pytest.raises(ConfigurationError, match="input width 3"):
        mlp_forward(params, np.zeros((2, 5)))
    with pytest.raises(ConfigurationError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 1))))


def test_float16_is_rejected():
    with pytest.raises(ConfigurationError):
        set_default_dtype(np.float16)


@pytest.mark.parametrize("layer_norm_output", [False, True])
def test_mlp_gradients_match_finite_differences(float64, layer_norm_output):
    rng = np.random.default_rng(7)
    params = init_mlp([4, 8, 4], rng, layer_norm=layer_norm_output)
    for b in params.biases:
        b.data[:] = rng.standard_normal(b.shape) * 0.1
    x = rng.standard_normal((5, 4))
    weights = rng.standard_normal((5, 4))

    def loss() -> float:
        return float(_weighted_sum(mlp_forward(params, x), weights).data)

    out = _weighted_sum(mlp_forward(params, x), weights)
    out.backward()
    for tensor in params.named().values():
        for index in np.ndindex(tensor.shape):
            numeric = central_difference(loss, tensor.data, index)
            np.testing.assert_allclose(tensor.grad[index], numeric, rtol=1e-4, atol=1e-8)


def test_graph_ops_gradients_match_finite_differences(float64):
    rng = np.random.default_rng(11)
    x = parameter(rng.standard_normal((6, 3)))
    e = parameter(rng.standard_normal((7, 2)))
    gain = parameter(1.0 + 0.1 * rng.standard_normal(5))
    bias = parameter(0.1 * rng.standard_normal(5))
    senders = np.array([0, 1, 2, 3, 4, 5, 0])
    receivers = np.array([1, 2, 3, 4, 5, 0, 3])
    weights = rng.standard_normal((6, 5))

    def build() -> Tensor:
        msg = concat([gather(x, senders), e], axis=-1)
        summed = segment_sum(msg, receivers, 6)
        averaged = segment_mean(msg, receivers, 6)
        h = layer_norm(relu(summed) + square(averaged), gain, bias)
        return _weighted_sum(h, weights)

    build().backward()
    for tensor in (x, e, gain, bias):
        for index in np.ndindex(tensor.shape):
            numeric = central_difference(lambda: float(build().data), tensor.data, index)
            np.testing.assert_allclose(tensor.grad[index], numeric, rtol=1e-4, atol=1e-8)


def test_segment_ops_leave_empty_segments_zero():
    x = Tensor(np.array([[1.0], [3.0]]))
    np.testing.assert_allclose(segment_sum(x, np.array([0, 0]), 3).data, [[4.0], [0.0], [0.0]])
    np.testing.assert_allclose(segment_mean(x, np.array([2, 2]), 3).data, [[0.0], [0.0], [2.0]])


def test_out_of_range_indices_are_structural_errors():
    x = Tensor(np.zeros((3, 2)))
    with pytest.raises(StructuralError):
        gather(x, np.array([0, 3]))
    with pytest.raises(StructuralError):
        segment_sum(x, np.array([0, 1, 5]), 3)


def test_backward_handles_deep_chains():
    leaf = parameter(np.array([1.0]))
    out = leaf
    for _ in range(5000):
        out = out + 1.0
    sum_all(out).backward()
    np.testing.assert_allclose(leaf.grad, [1.0])


def test_gradients_accumulate_over_shared_leaves():
    a = parameter(np.array([2.0, -1.0]))
    sum_all(mul(a, a)).backward()
    np.testing.assert_allclose(a.grad, [4.0, -2.0])


def test_mean_all_spreads_gradient_evenly():
    a = parameter(np.arange(6.0).reshape(2, 3))
    out = mean_all(a)
    assert float(out.data) == pytest.approx(2.5)
    out.backward()
    np.testing.assert_allclose(a.grad, np.full((2, 3), 1.0 / 6.0), rtol=1e-6)


def test_adam_zero_gradient_leaves_parameters():
    params = {"w": np.array([1.5, -2.0], dtype=np.float32)}
    new, state = adam_step(params, {"w": np.zeros(2, dtype=np.float32)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(new["w"], params["w"])
    assert state.step == 1


def test_adam_first_step_moves_by_lr():
    new, state = adam_step({"p": np.array([0.0])}, {"p": np.array([1.0])}, AdamState(), lr=0.1)
    np.testing.assert_allclose(new["p"], [-0.1], rtol=1e-6)
    np.testing.assert_allclose(state.m["p"], [0.1])
    np.testing.assert_allclose(state.v["p"], [0.001])


def test_adam_is_pure_and_deterministic():
    rng = np.random.default_rng(0)
    params = {"a": rng.standard_normal(3), "b": rng.standard_normal(2)}
    grads = {"a": rng.standard_normal(3)}
    before = {k: v.copy() for k, v in params.items()}
    first, s1 = adam_step(params, grads, AdamState(), lr=1e-2)
    second, s2 = adam_step(params, grads, AdamState(), lr=1e-2)
    for name in params:
        np.testing.assert_array_equal(params[name], before[name])
        np.testing.assert_array_equal(first[name], second[name])
    np.testing.assert_array_equal(first["b"], params["b"])
    assert "b" not in s1.m


def test_normalizer_is_identity_until_two_rows():
    norm = RunningNormalizer(width=2)
    rows = np.array([[5.0, -1.0]])
    np.testing.assert_array_equal(normalizer_apply(norm, rows), rows)
    normalizer_update(norm, rows)
    np.testing.assert_array_equal(normalizer_apply(norm, rows), rows)


def test_normalizer_standardizes():
    norm = RunningNormalizer(width=2)
    normalizer_update(norm, np.array([[-1.0, 4.0], [1.0, 4.0]]))
    out = normalizer_apply(norm, np.array([[-1.0, 4.0], [1.0, 4.0]]))
    np.testing.assert_allclose(out[:, 0], [-1.0, 1.0])
    np.testing.assert_allclose(out[:, 1], [0.0, 0.0])
    np.testing.assert_allclose(norm.inverse(out), [[-1.0, 4.0], [1.0, 4.0]])


def test_normalizer_state_round_trip():
    norm = RunningNormalizer(width=3)
    norm.update(np.random.default_rng(0).standard_normal((10, 3)))
    restored = RunningNormalizer.from_arrays(norm.state_arrays())
    np.testing.assert_array_equal(restored.mean, norm.mean)
    np.testing.assert_array_equal(restored.std, norm.std)
