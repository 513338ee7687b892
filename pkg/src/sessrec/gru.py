"""A single GRU layer with explicit forward and backward passes.

Gate convention (update gate first):

    z    = sigmoid(x W_z + h U_z + b_z)
    r    = sigmoid(x W_r + h U_r + b_r)
    hbar = tanh(x W_h + (r * h) U_h + b_h)
    h_new = (1 - z) * h + z * hbar

Inputs are either dense rows or item indices standing for one-hot rows.  The
index path reads single rows of the input weights, which is bit-identical to
multiplying by an explicit one-hot vector, and may carry an extra dense block
that occupies the trailing rows of the input weights (used to feed a context
vector alongside the one-hot item).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .tensor_math import glorot_uniform


@dataclass
class GruParams:
    """Weights of one GRU layer. W_* are (d_in, d_h); U_* are (d_h, d_h)."""

    w_z: np.ndarray
    w_r: np.ndarray
    w_h: np.ndarray
    u_z: np.ndarray
    u_r: np.ndarray
    u_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    @property
    def d_in(self):
        return self.w_z.shape[0]

    @property
    def d_h(self):
        return self.w_z.shape[1]

    def named(self, prefix=""):
        """Stable (name, array) pairs, used by optimizers and checkpoints."""
        fields = ("w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h")
        return [(prefix + name, getattr(self, name)) for name in fields]

    def zeros_like(self):
        return GruParams(*(np.zeros_like(arr) for _, arr in self.named()))


def init_gru(rng, d_in, d_h):
    """Glorot-uniform weights, zero biases, drawn in a fixed field order."""
    w_z = glorot_uniform(rng, d_in, d_h)
    w_r = glorot_uniform(rng, d_in, d_h)
    w_h = glorot_uniform(rng, d_in, d_h)
    u_z = glorot_uniform(rng, d_h, d_h)
    u_r = glorot_uniform(rng, d_h, d_h)
    u_h = glorot_uniform(rng, d_h, d_h)
    zeros = lambda: np.zeros(d_h)
    return GruParams(w_z, w_r, w_h, u_z, u_r, u_h, zeros(), zeros(), zeros())


@dataclass
class GruTape:
    """Intermediates saved by the forward pass for the backward pass."""

    x: np.ndarray | None
    items: np.ndarray | None
    extra: np.ndarray | None
    h_prev: np.ndarray
    z: np.ndarray
    r: np.ndarray
    q: np.ndarray
    hbar: np.ndarray


def _input_product(w, x, items, extra, extra_rows):
    if items is None:
        return x @ w
    out = w[items].copy()
    if extra is not None:
        out += extra @ w[-extra_rows:]
    return out


def _forward(params, x, items, extra, h_prev):
    extra_rows = extra.shape[1] if extra is not None else 0
    pre_z = _input_product(params.w_z, x, items, extra, extra_rows) + h_prev @ params.u_z + params.b_z
    pre_r = _input_product(params.w_r, x, items, extra, extra_rows) + h_prev @ params.u_r + params.b_r
    z = expit(pre_z)
    r = expit(pre_r)
    q = r * h_prev
    pre_h = _input_product(params.w_h, x, items, extra, extra_rows) + q @ params.u_h + params.b_h
    hbar = np.tanh(pre_h)
    h_new = (1.0 - z) * h_prev + z * hbar
    tape = GruTape(x=x, items=items, extra=extra, h_prev=h_prev, z=z, r=r, q=q, hbar=hbar)
    return h_new, tape


def gru_forward(params, x, h_prev):
    """One step on dense input rows x of shape (batch, d_in)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != params.d_in:
        raise ValueError(f"input width {x.shape[1]} does not match d_in {params.d_in}")
    return _forward(params, x, None, None, h_prev)


def gru_forward_items(params, items, h_prev, extra=None):
    """One step on one-hot inputs given as item indices of shape (batch,).

    ``extra`` is an optional dense (batch, k) block multiplied against the
    trailing k rows of the input weights, i.e. the input is the concatenation
    [one_hot(items), extra].
    """
    items = np.asarray(items, dtype=np.intp)
    return _forward(params, None, items, extra, h_prev)


def gru_backward(params, tape, d_hnew, into=None):
    """Backpropagate one step.

    Accumulates parameter gradients into ``into`` (a GruParams of gradient
    buffers, allocated when None) and returns (grads, d_input, d_hprev).
    ``d_input`` is the gradient on dense input rows, or on the extra block for
    the index path (None for a pure one-hot input).
    """
    g = into if into is not None else params.zeros_like()
    h_prev, z, r, q, hbar = tape.h_prev, tape.z, tape.r, tape.q, tape.hbar

    d_z = d_hnew * (hbar - h_prev)
    d_hbar = d_hnew * z
    d_hprev = d_hnew * (1.0 - z)

    d_pre_h = d_hbar * (1.0 - hbar * hbar)
    d_q = d_pre_h @ params.u_h.T
    d_r = d_q * h_prev
    d_hprev = d_hprev + d_q * r

    d_pre_z = d_z * z * (1.0 - z)
    d_pre_r = d_r * r * (1.0 - r)
    d_hprev = d_hprev + d_pre_z @ params.u_z.T + d_pre_r @ params.u_r.T

    g.u_z += h_prev.T @ d_pre_z
    g.u_r += h_prev.T @ d_pre_r
    g.u_h += q.T @ d_pre_h
    g.b_z += d_pre_z.sum(axis=0)
    g.b_r += d_pre_r.sum(axis=0)
    g.b_h += d_pre_h.sum(axis=0)

    pre_grads = ((g.w_z, params.w_z, d_pre_z), (g.w_r, params.w_r, d_pre_r), (g.w_h, params.w_h, d_pre_h))
    if tape.items is None:
        x = tape.x
        d_x = np.zeros_like(x)
        for g_w, w, d_pre in pre_grads:
            g_w += x.T @ d_pre
            d_x += d_pre @ w.T
        return g, d_x, d_hprev

    extra = tape.extra
    d_extra = np.zeros_like(extra) if extra is not None else None
    k = extra.shape[1] if extra is not None else 0
    for g_w, w, d_pre in pre_grads:
        np.add.at(g_w, tape.items, d_pre)
        if extra is not None:
            g_w[-k:] += extra.T @ d_pre
            d_extra += d_pre @ w[-k:].T
    return g, d_extra, d_hprev
