# core/tensorcore.py
"""Dense tensors with reverse-mode differentiation, MLPs, Adam and running normalizers."""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from utils.constants import ADAM_BETAS, ADAM_EPS, LAYER_NORM_EPS, NORMALIZER_EPS
from utils.errors import ConfigurationError, StructuralError

logger = logging.getLogger(__name__)

_DEFAULT_DTYPE = np.float32

ArrayLike = Union[np.ndarray, float, Sequence[float]]


def set_default_dtype(dtype) -> None:
    """Switch the floating type used for new parameters and features."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigurationError(f"Unsupported tensor dtype: {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """A dense array plus the tape entry that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None,
    ):
        if isinstance(data, np.ndarray) and data.dtype.kind == "f":
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if not self.requires_grad:
            return
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.data.dtype)
        pending: Dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(_topological_order(self)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(value: Union[Tensor, ArrayLike], like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(value, dtype=dtype))


def parameter(data: np.ndarray, name: Optional[str] = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=_DEFAULT_DTYPE), requires_grad=True, name=name)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def scatter_rows(values: np.ndarray, index: np.ndarray, num_rows: int) -> np.ndarray:
    """Sum rows of ``values`` into ``num_rows`` buckets given by ``index``."""
    tail = values.shape[1:]
    if index.shape[0] == 0:
        return np.zeros((num_rows,) + tail, dtype=values.dtype)
    m = index.shape[0]
    incidence = sp.csr_matrix(
        (np.ones(m, dtype=values.dtype), (index, np.arange(m))), shape=(num_rows, m)
    )
    return np.asarray(incidence @ values.reshape(m, -1)).reshape((num_rows,) + tail)


# ===== Section: differentiable operations =====

def add(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    return _result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    return _result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    return _result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x: Tensor, factor: float) -> Tensor:
    factor = x.dtype.type(factor)
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[0]:
        raise ConfigurationError(f"matmul width mismatch: {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def square(x: Tensor) -> Tensor:
    return _result(x.data * x.data, (x,), lambda g: (2 * g * x.data,))


def sum_all(x: Tensor) -> Tensor:
    return _result(
        np.asarray(x.data.sum(), dtype=x.dtype), (x,),
        lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),),
    )


def mean_all(x: Tensor) -> Tensor:
    n = max(x.data.size, 1)
    return scale(sum_all(x), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=axis), tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Rows of ``x`` selected by ``index``."""
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise StructuralError(f"gather index out of range for {n} rows")
    return _result(x.data[index], (x,), lambda g: (scatter_rows(g, index, n),))


def segment_sum(x: Tensor, index: np.ndarray, num_segments: int) -> Tensor:
    """Sum of rows sharing a segment id; empty segments are zero."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != x.shape[0]:
        raise StructuralError("segment index length differs from row count")
    if index.size and (index.min() < 0 or index.max() >= num_segments):
        raise StructuralError(f"segment index out of range for {num_segments} segments")
    return _result(scatter_rows(x.data, index, num_segments), (x,), lambda g: (g[index],))


def segment_mean(x: Tensor, index: np.ndarray, num_segments: int) -> Tensor:
    """Mean of rows sharing a segment id; empty segments are zero."""
    index = np.asarray(index, dtype=np.int64)
    counts = np.bincount(index, minlength=num_segments).astype(x.dtype)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0).astype(x.dtype)
    summed = segment_sum(x, index, num_segments)
    return mul(summed, Tensor(inv[:, None]))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        g_gain = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        g_bias = g.reshape(-1, x.shape[-1]).sum(axis=0)
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g_gain, g_bias

    return _result(out.astype(x.dtype), (x, gain, bias), backward)


# ===== Section: MLP =====

def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(_DEFAULT_DTYPE)


@dataclass
class MlpParams:
    """Weights (in, out) and biases per layer, optional output layer norm."""
    weights: List[Tensor]
    biases: List[Tensor]
    ln_gain: Optional[Tensor] = None
    ln_bias: Optional[Tensor] = None
    residual: bool = False

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ConfigurationError("MLP needs one bias per weight and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.data.ndim != 2 or b.shape != (w.shape[1],):
                raise ConfigurationError(f"MLP layer {k} has weight {w.shape} and bias {b.shape}")
            if k and self.weights[k - 1].shape[1] != w.shape[0]:
                raise ConfigurationError(f"MLP layer {k} does not chain with layer {k - 1}")
        if (self.ln_gain is None) != (self.ln_bias is None):
            raise ConfigurationError("layer norm needs both gain and offset")
        if self.residual and self.in_width != self.out_width:
            raise ConfigurationError(
                f"residual MLP needs equal widths, got {self.in_width} -> {self.out_width}"
            )

    @property
    def sizes(self) -> List[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def layer_norm(self) -> bool:
        return self.ln_gain is not None

    def named(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{k}"] = w
            out[f"b{k}"] = b
        if self.layer_norm:
            out["ln_gain"] = self.ln_gain
            out["ln_bias"] = self.ln_bias
        return out

    @classmethod
    def from_named(cls, tensors: Mapping[str, Tensor], residual: bool = False) -> "MlpParams":
        depth = sum(1 for key in tensors if key.startswith("w"))
        try:
            weights = [tensors[f"w{k}"] for k in range(depth)]
            biases = [tensors[f"b{k}"] for k in range(depth)]
        except KeyError as e:
            raise StructuralError(f"MLP tensors missing {e}")
        return cls(weights, biases, tensors.get("ln_gain"), tensors.get("ln_bias"), residual)


def init_mlp(
    sizes: Sequence[int],
    rng: np.random.Generator,
    layer_norm: bool = True,
    residual: bool = False,
) -> MlpParams:
    """Glorot-uniform weights, zero biases, unit layer-norm gain."""
    weights = [parameter(glorot_uniform(a, b, rng)) for a, b in zip(sizes[:-1], sizes[1:])]
    biases = [parameter(np.zeros(b)) for b in sizes[1:]]
    gain = parameter(np.ones(sizes[-1])) if layer_norm else None
    offset = parameter(np.zeros(sizes[-1])) if layer_norm else None
    return MlpParams(weights, biases, gain, offset, residual)


def mlp_forward(params: MlpParams, x: Union[Tensor, np.ndarray]) -> Tensor:
    """ReLU hidden layers, linear output, optional layer norm, optional residual."""
    x = as_tensor(x, like=params.weights[0])
    if x.shape[-1] != params.in_width:
        raise ConfigurationError(
            f"MLP expects input width {params.in_width}, got {x.shape[-1]}"
        )
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = add(matmul(h, w), b)
        if k < last:
            h = relu(h)
    if params.layer_norm:
        h = layer_norm(h, params.ln_gain, params.ln_bias)
    if params.residual:
        h = add(h, x)
    return h


# ===== Section: optimizer =====

@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: Tuple[float, float] = ADAM_BETAS,
    eps: float = ADAM_EPS,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    One bias-corrected Adam update.

    Pure: returns new parameter arrays and a new state; inputs are untouched.
    Parameters without a gradient entry are carried over unchanged.
    """
    b1, b2 = betas
    step = state.step + 1
    new_params: Dict[str, np.ndarray] = {}
    new_m: Dict[str, np.ndarray] = dict(state.m)
    new_v: Dict[str, np.ndarray] = dict(state.v)
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            new_params[name] = value
            continue
        m = b1 * state.m.get(name, np.zeros_like(value)) + (1.0 - b1) * grad
        v = b2 * state.v.get(name, np.zeros_like(value)) + (1.0 - b2) * grad * grad
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_params[name] = (value - update).astype(value.dtype)
        new_m[name] = m.astype(value.dtype)
        new_v[name] = v.astype(value.dtype)
    return new_params, AdamState(step=step, m=new_m, v=new_v)


# ===== Section: online normalization =====

@dataclass
class RunningNormalizer:
    """Cumulative per-channel statistics; identity until two rows were seen."""
    width: int
    eps: float = NORMALIZER_EPS
    count: float = 0.0
    total: np.ndarray = None
    total_sq: np.ndarray = None

    def __post_init__(self):
        if self.total is None:
            self.total = np.zeros(self.width, dtype=np.float64)
        if self.total_sq is None:
            self.total_sq = np.zeros(self.width, dtype=np.float64)

    @property
    def ready(self) -> bool:
        return self.count >= 2

    @property
    def mean(self) -> np.ndarray:
        if not self.ready:
            return np.zeros(self.width)
        return self.total / self.count

    @property
    def std(self) -> np.ndarray:
        if not self.ready:
            return np.ones(self.width)
        mean = self.total / self.count
        var = np.maximum(self.total_sq / self.count - mean * mean, 0.0)
        return np.maximum(np.sqrt(var), self.eps)

    def update(self, rows: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, self.width)
        self.count += rows.shape[0]
        self.total += rows.sum(axis=0)
        self.total_sq += (rows * rows).sum(axis=0)

    def apply(self, rows):
        if not self.ready:
            return rows
        if isinstance(rows, Tensor):
            inv = (1.0 / self.std).astype(rows.dtype)
            return mul(sub(rows, Tensor(self.mean.astype(rows.dtype))), Tensor(inv))
        rows = np.asarray(rows)
        return ((rows - self.mean) / self.std).astype(rows.dtype)

    def inverse(self, rows: np.ndarray) -> np.ndarray:
        if not self.ready:
            return rows
        rows = np.asarray(rows)
        return (rows * self.std + self.mean).astype(rows.dtype)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {
            "count": np.array([self.count], dtype=np.float64),
            "sum": self.total.copy(),
            "sumsq": self.total_sq.copy(),
        }

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "RunningNormalizer":
        total = np.asarray(arrays["sum"], dtype=np.float64)
        return cls(
            width=total.shape[0],
            count=float(np.asarray(arrays["count"]).reshape(-1)[0]),
            total=total.copy(),
            total_sq=np.asarray(arrays["sumsq"], dtype=np.float64).copy(),
        )


def normalizer_update(norm: RunningNormalizer, rows: np.ndarray) -> None:
    norm.update(rows)


def normalizer_apply(norm: RunningNormalizer, rows):
    return norm.apply(rows)
