"""Dense float64 tensors with tape-based reverse-mode differentiation and Adam.

Operations record themselves on the ``Graph`` that is active in the current
thread (``with Graph() as graph: ...``). Outside a graph nothing is recorded,
which is how inference runs.
"""
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .constants import DimensionError, DomainError, GraphUsageError, NonFiniteError

logger = logging.getLogger(__name__)

_local = threading.local()

BackwardRule = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


def _ensure_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"Non-finite value produced by {what}")


class Tensor:
    """A float64 array that may take part in a recorded computation.

    Leaves created with ``requires_grad=True`` own a ``grad`` buffer of the same
    shape which ``backward`` accumulates into.
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None) -> None:
        self.data = np.array(data, dtype=np.float64)
        _ensure_finite(self.data, name or "Tensor()")
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = np.zeros_like(self.data) if requires_grad else None
        self._is_leaf = True

    @classmethod
    def _result(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.name = None
        out.grad = None
        out._is_leaf = False
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphUsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(other, self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(other, self)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def sum(self) -> "Tensor":
        return tsum(self)


@dataclass
class _Record:
    out: Tensor
    parents: Tuple[Tensor, ...]
    backward: BackwardRule
    op: str


class Graph:
    """Execution-ordered record of operations; replayed in reverse by ``backward``."""

    def __init__(self) -> None:
        self.records: List[_Record] = []
        self._backpropagated = False

    def __enter__(self) -> "Graph":
        stack = getattr(_local, "graphs", None)
        if stack is None:
            stack = _local.graphs = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.graphs.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, parents: Tuple[Tensor, ...], rule: BackwardRule, op: str) -> None:
        self.records.append(_Record(out, parents, rule, op))

    def reset(self) -> None:
        """Allow one more ``backward`` over the same record."""
        self._backpropagated = False


def current_graph() -> Optional[Graph]:
    stack = getattr(_local, "graphs", None)
    return stack[-1] if stack else None


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(data: np.ndarray, parents: Tuple[Tensor, ...], rule: BackwardRule, op: str) -> Tensor:
    _ensure_finite(data, op)
    graph = current_graph()
    tracked = graph is not None and any(p.requires_grad for p in parents)
    out = Tensor._result(data, tracked)
    if tracked:
        graph.record(out, parents, rule, op)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    return _emit(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def tsum(a: Tensor) -> Tensor:
    # Flattened row-major reduction: fixed order, bit-identical between runs
    total = np.add.reduce(a.data.reshape(-1), dtype=np.float64) if a.size else 0.0
    return _emit(np.array(total), (a,), lambda g: (np.full(a.shape, float(g)),), "sum")


def mean(a: Tensor, axis: Tuple[int, ...]) -> Tensor:
    count = int(np.prod([a.shape[ax] for ax in axis]))

    def rule(g: np.ndarray):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape) / count,)

    return _emit(a.data.mean(axis=axis), (a,), rule, "mean")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return _emit(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inverse),), "transpose")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, slice, type(Ellipsis))) or p is None for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    basic = _is_basic_index(index)

    def rule(g: np.ndarray):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _emit(np.array(a.data[index]), (a,), rule, "getitem")


def stack(tensors: Sequence[Tensor]) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    return _emit(np.stack([t.data for t in tensors]), tensors,
                 lambda g: tuple(g[i] for i in range(len(tensors))), "stack")


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise DomainError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    positive = x.data >= 0.0
    return _emit(np.where(positive, x.data, slope * x.data), (x,),
                 lambda g: (np.where(positive, g, slope * g),), "leaky_relu")


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    """Two-branch logistic function that never overflows."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(z: np.ndarray) -> np.ndarray:
    """log(1 + e^z) without overflow."""
    return np.logaddexp(0.0, np.asarray(z, dtype=np.float64))


def sigmoid(x: Tensor) -> Tensor:
    s = stable_sigmoid(x.data)
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def bce(logits: Tensor, target, weight=None) -> Tensor:
    """Summed binary cross-entropy between sigmoid(logits) and targets.

    Computed in the fused logit form ``max(z, 0) - z*t + log1p(exp(-|z|))``.
    ``weight`` is an optional constant multiplying each element's loss.
    """
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != logits.shape:
        raise DimensionError(f"bce shapes differ: logits {logits.shape} vs target {t.shape}")
    if np.any((t < 0.0) | (t > 1.0)) or not np.all(np.isfinite(t)):
        raise DomainError("bce targets must lie in [0, 1]")
    w = None if weight is None else np.broadcast_to(np.asarray(weight, dtype=np.float64), t.shape)

    z = logits.data
    per_element = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    if w is not None:
        per_element = per_element * w
    total = np.add.reduce(per_element.reshape(-1), dtype=np.float64) if per_element.size else 0.0

    def rule(g: np.ndarray):
        d = stable_sigmoid(z) - t
        if w is not None:
            d = d * w
        return (float(g) * d,)

    return _emit(np.array(total), (logits,), rule, "bce")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map of [B, C_in] rows with a [C_out, C_in] weight."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear shapes incompatible: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
    out = x.data @ weight.data.T + bias.data
    return _emit(out, (x, weight, bias),
                 lambda g: (g @ weight.data, g.T @ x.data, g.sum(axis=0)), "linear")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [C_in,H,W] (or batched [B,C_in,H,W]) input with [C_out,C_in,kh,kw] kernels."""
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects [C,H,W] or [B,C,H,W] input and 4-d kernel, got {x.shape}, {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    xs = x.data if batched else x.data[None]
    _, channels, height, width = xs.shape
    if channels != c_in:
        raise DimensionError(f"conv2d input has {channels} channels, kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d bias shape {bias.shape} does not match {c_out} output channels")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    out_h = (height + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"conv2d output would be empty for input {height}x{width}, kernel {kh}x{kw}")

    padded = np.pad(xs, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xs
    # [B, C, out_h, out_w, kh, kw]
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3]))  # [B, out_h, out_w, C_out]
    out = out.transpose(0, 3, 1, 2) + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def rule(g: np.ndarray):
        gb = g if batched else g[None]
        grad_kernel = np.tensordot(gb, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_bias = gb.sum(axis=(0, 2, 3))
        cols = np.tensordot(gb, kernel.data, axes=([1], [0]))  # [B, out_h, out_w, C_in, kh, kw]
        grad_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += \
                    cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        grad_x = grad_padded[:, :, padding:padding + height, padding:padding + width] if padding else grad_padded
        if not batched:
            grad_x = grad_x[0]
        return (grad_x, grad_kernel, grad_bias)

    return _emit(out if batched else out[0], (x, kernel, bias), rule, "conv2d")


def backward(loss: Tensor, graph: Graph) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf reached by ``graph``."""
    if loss.size != 1:
        raise GraphUsageError(f"backward needs a scalar root, got shape {loss.shape}")
    if graph._backpropagated:
        raise GraphUsageError("graph was already backpropagated; call reset() before running backward again")
    graph._backpropagated = True
    if not loss.requires_grad:
        return

    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for record in reversed(graph.records):
        g = pending.pop(id(record.out), None)
        if g is None:
            continue
        for parent, parent_grad in zip(record.parents, record.backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent._is_leaf:
                parent.grad += parent_grad
            elif id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + parent_grad
            else:
                pending[id(parent)] = parent_grad


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Optional[Mapping[str, np.ndarray]], state: AdamState) -> None:
    """Bias-corrected Adam update applied in place.

    :param params: named parameters to update
    :param grads: named gradients; ``None`` uses each parameter's ``grad`` buffer
    :param state: moments and step counter, updated in place
    """
    grads = grads if grads is not None else {name: p.grad for name, p in params.items()}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"Non-finite gradient for parameter {name}")
        if name in state.m and state.m[name].shape != p.shape:
            raise DimensionError(f"Adam moments for {name} have shape {state.m[name].shape}, parameter has {p.shape}")

    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
