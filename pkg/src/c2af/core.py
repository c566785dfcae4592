"""Dense numerical kernels shared by every part of the network.

Tensors are plain ``numpy.ndarray`` objects in float64. Differentiable
operations come as forward/backward pairs; there is no autodiff tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

CE_EPS = 1e-12


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x


@dataclass
class Param:
    """A learnable tensor and its gradient buffer."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ValueError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


# ---------------------------------------------------------------------------
# matmul


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def matmul_backward(a: np.ndarray, b: np.ndarray, dout: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(dout * (a @ b))`` with respect to ``a`` and ``b``."""
    return dout @ b.T, a.T @ dout


# ---------------------------------------------------------------------------
# activations


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: no overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * as_tensor(x)))


def sigmoid_grad(y: np.ndarray) -> np.ndarray:
    """Derivative of sigmoid expressed through its output ``y``."""
    return y * (1.0 - y)


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(as_tensor(x))


def tanh_grad(y: np.ndarray) -> np.ndarray:
    """Derivative of tanh expressed through its output ``y``."""
    return 1.0 - y * y


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(as_tensor(x), 0.0)


def relu_grad(x: np.ndarray) -> np.ndarray:
    """Derivative of ReLU at its input ``x`` (0 at the kink)."""
    return (as_tensor(x) > 0).astype(np.float64)


# ---------------------------------------------------------------------------
# softmax / cross-entropy


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = as_tensor(z)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray, axis: int = -1) -> np.ndarray:
    """Map a gradient w.r.t. softmax outputs ``p`` back to the logits."""
    return p * (dp - (p * dp).sum(axis=axis, keepdims=True))


def _check_labels(y, k: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if np.any(y < 0) or np.any(y >= k):
        raise IndexError(f"class index out of range for K={k}")
    return y


def cross_entropy(p: np.ndarray, y) -> float | np.ndarray:
    """``-log(p[y] + eps)``; batched over leading axes when ``y`` is an array."""
    p = as_tensor(p)
    y = _check_labels(y, p.shape[-1])
    picked = np.take_along_axis(p, y[..., None], axis=-1)[..., 0]
    # clamp: p == 1 would otherwise give -log(1 + eps) < 0
    out = np.maximum(-np.log(picked + CE_EPS), 0.0)
    return float(out) if out.ndim == 0 else out


def cross_entropy_grad(p: np.ndarray, y) -> np.ndarray:
    """Gradient of :func:`cross_entropy` with respect to ``p``."""
    p = as_tensor(p)
    y = _check_labels(y, p.shape[-1])
    dp = np.zeros_like(p)
    picked = np.take_along_axis(p, y[..., None], axis=-1)
    np.put_along_axis(dp, y[..., None], -1.0 / (picked + CE_EPS), axis=-1)
    return dp


def softmax_cross_entropy(logits: np.ndarray, y) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy over a batch of logits.

    Returns ``(loss, probs, dlogits)`` where ``dlogits`` is the gradient of the
    mean loss.
    """
    probs = softmax(logits)
    y = np.asarray(y, dtype=np.int64)
    n = probs.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    loss = float(np.mean(cross_entropy(probs, y)))
    dlogits = softmax_backward(probs, cross_entropy_grad(probs, y) / n)
    return loss, probs, dlogits


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def init(cls, params: Iterable[Param]) -> "AdamState":
        state = cls()
        for p in params:
            state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        return state


def adam_step(
    params: Sequence[Param],
    state: AdamState,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Apply one bias-corrected Adam update in place."""
    for p in params:
        if p.name not in state.m:
            raise KeyError(f"no optimizer state for parameter {p.name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p in params:
        g = p.grad
        m = state.m[p.name]
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------------------
# finite differences


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero gradients stable."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(
    loss_fn: Callable[[], float],
    params: Sequence[Param],
    eps: float = 1e-5,
    n_samples: int | None = 20,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Compare ``param.grad`` against central differences of ``loss_fn``.

    ``loss_fn`` is evaluated with the current parameter values; it may
    overwrite grads (they are snapshotted first) but nothing else. Up to ``n_samples`` coordinates per parameter are checked
    (all of them when ``n_samples`` is None or the tensor is smaller). Returns
    the max relative error per parameter name.
    """
    if not eps > 0:
        raise ValueError(f"finite-difference step must be positive, got {eps}")
    rng = np.random.default_rng(0) if rng is None else rng
    analytic = {p.name: p.grad.copy() for p in params}
    worst: dict[str, float] = {}
    for p in params:
        size = p.value.size
        if n_samples is None or size <= n_samples:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=n_samples, replace=False)
        flat = p.value.reshape(-1)
        gflat = analytic[p.name].reshape(-1)
        err = 0.0
        for i in coords:
            old = flat[i]
            flat[i] = old + eps
            f_plus = loss_fn()
            flat[i] = old - eps
            f_minus = loss_fn()
            flat[i] = old
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(f"non-finite loss while perturbing {p.name}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = max(err, relative_error(float(gflat[i]), numeric))
        worst[p.name] = err
    for p in params:
        p.grad = analytic[p.name]
    return worst
