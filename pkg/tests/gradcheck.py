"""Central finite-difference helpers shared by the gradient tests."""
from typing import Callable, List, Sequence

import numpy as np

from gridood.diffcore import Graph, Tensor, backward


def analytic_gradients(build: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> List[np.ndarray]:
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Graph() as graph:
        loss = build(*tensors)
        backward(loss, graph)
    return [t.grad.copy() for t in tensors]


def numeric_gradients(build: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-3) -> List[np.ndarray]:
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def value() -> float:
        return build(*(Tensor(a) for a in arrays)).item()

    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            original = a[idx]
            a[idx] = original + h
            plus = value()
            a[idx] = original - h
            minus = value()
            a[idx] = original
            g[idx] = (plus - minus) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Norm-wise relative error; tiny gradients are compared absolutely."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    diff = np.linalg.norm(analytic - numeric)
    return diff if scale < floor else diff / scale


def max_gradient_error(build: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-3) -> float:
    analytic = analytic_gradients(build, arrays)
    numeric = numeric_gradients(build, arrays, h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
