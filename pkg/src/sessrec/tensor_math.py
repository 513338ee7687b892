"""Dense math kernels for the recurrent models.

Activations, inverted dropout, Glorot initialization, the AdaGrad-with-momentum
update rule, and the little-endian matrix serialization used by checkpoints.
Everything operates on float64 arrays with batch rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

EPS = 1e-6

ACTIVATIONS = ("identity", "sigmoid", "tanh", "softmax")


def make_rng(seed):
    """Deterministic random generator: equal seeds yield equal streams."""
    return np.random.default_rng(seed)


def affine(x, w, b):
    """Compute ``x @ w + b`` with explicit shape checking.

    x is (batch, d_in), w is (d_in, d_out), b is (d_out,).
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ValueError(
            f"affine expects 2-D x, 2-D w, 1-D b; got {x.shape}, {w.shape}, {b.shape}"
        )
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ValueError(
            f"affine shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}"
        )
    return x @ w + b


def columns_affine(x, w, b, columns):
    """Scores for selected output columns: ``(x @ w + b)[:, columns]``.

    Each requested column is accumulated by an identical ``x @ w[:, j]``
    product, so scoring a subset of columns during training and the full
    catalog during evaluation agree bit for bit on shared columns.  b may be
    None to skip the bias.
    """
    columns = np.asarray(columns, dtype=np.intp)
    out = np.empty((x.shape[0], columns.shape[0]))
    for pos, j in enumerate(columns):
        out[:, pos] = x @ w[:, j]
    if b is not None:
        out += b[columns]
    return out


def softmax_rows(x):
    """Row-wise softmax, stabilized by subtracting each row maximum."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def apply_activation(x, kind):
    """Apply a named activation elementwise (softmax acts on rows)."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "identity":
        return x
    if kind == "sigmoid":
        return expit(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "softmax":
        return softmax_rows(x)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def dropout_mask(rng, shape, p):
    """Inverted-dropout mask: entries are 0 with probability p, else 1/(1-p).

    Multiplying by the mask keeps activations unbiased in expectation, so
    inference needs no rescaling.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def dropout(x, p, rng, training=True):
    """Apply inverted dropout during training; identity otherwise."""
    if not training or p == 0.0:
        return np.asarray(x, dtype=np.float64)
    return x * dropout_mask(rng, np.shape(x), p)


def glorot_uniform(rng, d_in, d_out):
    """Glorot/Xavier uniform init: U(-a, a) with a = sqrt(6 / (d_in + d_out))."""
    limit = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_in, d_out))


@dataclass
class OptState:
    """Per-parameter state for AdaGrad with classical momentum."""

    learning_rate: float
    momentum: float = 0.0
    eps: float = EPS
    accum: np.ndarray = None
    velocity: np.ndarray = None


def adagrad_momentum_step(param, grad, state):
    """Update ``param`` in place from ``grad``.

    accum   += grad^2
    adjusted = grad / (sqrt(accum) + eps)
    velocity = momentum * velocity + learning_rate * adjusted
    param   -= velocity
    """
    if state.accum is None:
        state.accum = np.zeros_like(param)
        state.velocity = np.zeros_like(param)
    state.accum += grad * grad
    adjusted = grad / (np.sqrt(state.accum) + state.eps)
    state.velocity *= state.momentum
    state.velocity += state.learning_rate * adjusted
    param -= state.velocity


class AdagradMomentum:
    """Keeps one OptState per named parameter and applies the shared rule."""

    def __init__(self, learning_rate, momentum=0.0, eps=EPS):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.eps = eps
        self._slots = {}

    def update(self, name, param, grad):
        state = self._slots.get(name)
        if state is None:
            state = OptState(self.learning_rate, self.momentum, self.eps)
            self._slots[name] = state
        adagrad_momentum_step(param, grad, state)


def write_matrix(fh, arr):
    """Write a matrix as little-endian int64 (rows, cols) + row-major float64.

    1-D arrays are stored as a single row.
    """
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"can only serialize 1-D or 2-D arrays, got ndim={arr.ndim}")
    header = np.array(arr.shape, dtype="<i8")
    fh.write(header.tobytes())
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_matrix(fh):
    """Inverse of write_matrix; always returns a 2-D float64 array."""
    header = fh.read(16)
    if len(header) != 16:
        raise ValueError("truncated matrix header")
    rows, cols = (int(v) for v in np.frombuffer(header, dtype="<i8"))
    if rows < 0 or cols < 0:
        raise ValueError(f"corrupt matrix header: {rows} x {cols}")
    payload = fh.read(rows * cols * 8)
    if len(payload) != rows * cols * 8:
        raise ValueError("truncated matrix payload")
    data = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return data.reshape(rows, cols)
