"""Dense real-array substrate: products, softmax, attention, MLP and a gradient checker.

Tensors are plain :class:`numpy.ndarray` values. :func:`tensor` is the validating
constructor; everything downstream assumes finite inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit

GELU_K = 1.702


def tensor(data, shape=None, dtype=np.float64) -> np.ndarray:
    """Build a finite real array, optionally reshaped to ``shape``."""
    arr = np.array(data, dtype=dtype)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ValueError(f"extents must be positive, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise ValueError(f"cannot view {arr.size} values as {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, max-subtracted."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def attention_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query/key widths differ: {q.shape} vs {k.shape}")
    scale = 1.0 / np.sqrt(q.shape[-1])
    return softmax_rows((q @ np.swapaxes(k, -1, -2)) * scale)


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Scaled dot-product attention ``softmax(Q K^T / sqrt(d)) V``.

    ``q`` may carry leading batch axes; ``k`` and ``v`` are either shared 2-D
    matrices or batched like ``q``.
    """
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key/value token counts differ: {k.shape} vs {v.shape}")
    return attention_weights(q, k) @ v


def _sum_to(x: np.ndarray, shape: tuple) -> np.ndarray:
    while x.ndim > len(shape):
        x = x.sum(axis=0)
    return x


def attention_backward(q, k, v, weights, d_out):
    """Gradients of :func:`attention` given the softmax ``weights`` from the forward pass."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    d_v = _sum_to(np.swapaxes(weights, -1, -2) @ d_out, v.shape)
    d_w = d_out @ np.swapaxes(v, -1, -2)
    d_s = weights * (d_w - (d_w * weights).sum(axis=-1, keepdims=True))
    d_q = (d_s @ k) * scale
    d_k = _sum_to((np.swapaxes(d_s, -1, -2) @ q) * scale, k.shape)
    return d_q, d_k, d_v


def gelu(x: np.ndarray) -> np.ndarray:
    return x * expit(GELU_K * x)


def gelu_grad(x: np.ndarray) -> np.ndarray:
    s = expit(GELU_K * x)
    return s + GELU_K * x * s * (1.0 - s)


@dataclass
class MlpParams:
    """Two-layer perceptron ``act(x W1 + b1) W2 + b2`` acting on row vectors."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    activation: str = "gelu"

    def __post_init__(self):
        if self.w1.shape[1] != self.b1.shape[-1] or self.w1.shape[1] != self.w2.shape[0]:
            raise ValueError("hidden width does not chain through the MLP")
        if self.w2.shape[1] != self.b2.shape[-1]:
            raise ValueError("output bias width mismatch")

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int, scale: float = 1.0):
        return cls(
            w1=rng.standard_normal((d_in, d_hidden)) * scale / np.sqrt(d_in),
            b1=np.zeros(d_hidden),
            w2=rng.standard_normal((d_hidden, d_out)) * scale / np.sqrt(d_hidden),
            b2=np.zeros(d_out),
        )


def _gelu_pair(x: np.ndarray):
    s = expit(GELU_K * x)
    xs = x * s
    return xs, s + GELU_K * xs * (1.0 - s)


def _act(name: str):
    if name == "gelu":
        return gelu, _gelu_pair
    if name == "identity":
        return (lambda x: x), (lambda x: (x, np.ones_like(x)))
    raise ValueError(f"unknown activation {name!r}")


def mlp_forward(p: MlpParams, x: np.ndarray) -> np.ndarray:
    act, _ = _act(p.activation)
    return act(matmul(x, p.w1) + p.b1) @ p.w2 + p.b2


def mlp_backward(p: MlpParams, x: np.ndarray, d_out: np.ndarray):
    """Return ``(d_x, grads)`` where ``grads`` is an :class:`MlpParams` of gradients."""
    _, pair = _act(p.activation)
    pre = x @ p.w1 + p.b1
    hid, slope = pair(pre)
    d_pre = (d_out @ p.w2.T) * slope
    grads = MlpParams(
        w1=_flat2(x).T @ _flat2(d_pre),
        b1=_flat2(d_pre).sum(axis=0),
        w2=_flat2(hid).T @ _flat2(d_out),
        b2=_flat2(d_out).sum(axis=0),
        activation=p.activation,
    )
    return d_pre @ p.w1.T, grads


def _flat2(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (``x`` is not modified)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite objective near element {i}")
        g[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative discrepancy ``|a-b| / max(|a|, |b|)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
