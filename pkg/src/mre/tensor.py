"""Dense float64 kernel shared by every other module.

Matrices are plain C-ordered ``np.float64`` arrays. Every matmul in the model
goes through :func:`matmul` so the FLOP counter sees all real work.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
import zlib
from collections import Counter
from typing import Callable, Iterator

import numpy as np

DTYPE = np.float64

# gelu tanh approximation: 0.5 x (1 + tanh(GELU_C (x + GELU_A x^3)))
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------- FLOP tally

_flop_counter: contextvars.ContextVar[Counter | None] = contextvars.ContextVar(
    "flop_counter", default=None
)
_flop_scope: contextvars.ContextVar[str] = contextvars.ContextVar(
    "flop_scope", default="other"
)


@contextlib.contextmanager
def count_flops() -> Iterator[Counter]:
    """Tally multiply-add FLOPs (2*m*n*k per matmul) by scope while active."""
    tally: Counter = Counter()
    token = _flop_counter.set(tally)
    try:
        yield tally
    finally:
        _flop_counter.reset(token)


@contextlib.contextmanager
def flop_scope(name: str) -> Iterator[None]:
    token = _flop_scope.set(name)
    try:
        yield
    finally:
        _flop_scope.reset(token)


# ------------------------------------------------------------------ kernels


def as_matrix(x, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    m = np.ascontiguousarray(x, dtype=DTYPE)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got shape {m.shape}")
    if (rows is not None and m.shape[0] != rows) or (cols is not None and m.shape[1] != cols):
        raise ShapeError(f"expected shape ({rows}, {cols}), got {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of ``a`` (m x k) and ``b`` (k x n) in float64."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    tally = _flop_counter.get()
    if tally is not None:
        tally[_flop_scope.get()] += 2 * a.shape[0] * a.shape[1] * b.shape[1]
    return a @ b


def softmax_rows(m: np.ndarray) -> np.ndarray:
    z = m - m.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float) -> np.ndarray:
    """Normalize over the last axis; works on a vector or on the rows of a matrix."""
    y, _ = layer_norm_forward(x, gain, bias, eps)
    return y


def layer_norm_forward(x, gain, bias, eps):
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise ShapeError(
            f"layer_norm length mismatch: x {x.shape}, gain {gain.shape}, bias {bias.shape}"
        )
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    inv_d = 1.0 / x.shape[-1]
    mu = x.sum(axis=-1, keepdims=True) * inv_d
    xc = x - mu
    var = (xc * xc).sum(axis=-1, keepdims=True) * inv_d
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    return xhat * gain + bias, (xhat, inv_std, gain)


def layer_norm_backward(dy, cache):
    """Returns (dx, dgain, dbias); gain/bias grads are summed over rows."""
    xhat, inv_std, gain = cache
    g = dy * gain
    inv_d = 1.0 / dy.shape[-1]
    dx = inv_std * (
        g
        - g.sum(axis=-1, keepdims=True) * inv_d
        - xhat * ((g * xhat).sum(axis=-1, keepdims=True) * inv_d)
    )
    lead = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=lead), dy.sum(axis=lead)


def gelu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x * x * x)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    u = GELU_C * (x + GELU_A * x * x * x)
    t = np.tanh(u)
    du = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def finite_diff_grad(
    f: Callable[[np.ndarray], float], p: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``p`` (any shape)."""
    if not 1e-6 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-6, 1e-2], got {eps}")
    p = np.array(p, dtype=DTYPE)
    flat = p.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(p)
        flat[i] = orig - eps
        fm = f(p)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite f evaluation at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(p.shape)


# ---------------------------------------------------------------------- RNG

RNG_ALGORITHM = "PCG64 (numpy), streams derived via SeedSequence(seed, spawn_key=(crc32(name),))"


def rng_stream(seed: int, name: str = "") -> np.random.Generator:
    """Deterministic generator for ``(seed, name)``; distinct names give independent streams."""
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    key = (zlib.crc32(name.encode("utf-8")),) if name else ()
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))
