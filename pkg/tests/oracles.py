"""Independent reference implementations used to verify the library.

Everything here deliberately avoids the library's own code paths: scalar
loops instead of vectorized algebra, high-precision arithmetic instead of
float64, full sorts instead of incremental ranking.  Slow and simple on
purpose.
"""

import numpy as np
from mpmath import exp as mp_exp
from mpmath import log as mp_log
from mpmath import mp, mpf

mp.dps = 50


def rel_err(a, b):
    """Relative error with an absolute floor, safe near zero."""
    return abs(a - b) / max(abs(a), abs(b), 1e-3)


def central_difference(f, arr, h=1e-5):
    """Central finite-difference gradient of scalar f() w.r.t. arr, in place."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        up = f()
        arr[idx] = orig - h
        down = f()
        arr[idx] = orig
        grad[idx] = (up - down) / (2.0 * h)
    return grad


# ----------------------------------------------------------------------
# scalar GRU reference (pure Python loops, update-gate blending)
# ----------------------------------------------------------------------

def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def scalar_gru_step(params, x_row, h_row):
    """One GRU step computed coordinate by coordinate with Python floats."""
    d_h = params.u_z.shape[0]
    d_in = params.w_z.shape[0]
    # gates first: the reset-gated candidate needs every r value
    zs = np.zeros(d_h)
    rs = np.zeros(d_h)
    for j in range(d_h):
        z = params.b_z[j]
        r = params.b_r[j]
        for i in range(d_in):
            z += x_row[i] * params.w_z[i, j]
            r += x_row[i] * params.w_r[i, j]
        for k in range(d_h):
            z += h_row[k] * params.u_z[k, j]
            r += h_row[k] * params.u_r[k, j]
        zs[j] = _sigmoid(z)
        rs[j] = _sigmoid(r)
    out = np.zeros(d_h)
    for j in range(d_h):
        hbar = params.b_h[j]
        for i in range(d_in):
            hbar += x_row[i] * params.w_h[i, j]
        for k in range(d_h):
            hbar += rs[k] * h_row[k] * params.u_h[k, j]
        hbar = np.tanh(hbar)
        out[j] = (1.0 - zs[j]) * h_row[j] + zs[j] * hbar
    return out


# ----------------------------------------------------------------------
# high-precision loss references
# ----------------------------------------------------------------------

def _mp_sigmoid(x):
    return 1 / (1 + mp_exp(-x))


def mp_top1(positive, negatives):
    acc = mpf(0)
    for n in negatives:
        acc += _mp_sigmoid(mpf(n) - mpf(positive)) + _mp_sigmoid(mpf(n) ** 2)
    return float(acc / len(negatives))


def mp_bpr(positive, negatives):
    acc = mpf(0)
    for n in negatives:
        acc += -mp_log(_mp_sigmoid(mpf(positive) - mpf(n)))
    return float(acc / len(negatives))


def mp_xent(scores, positive_index):
    shift = mpf(float(max(scores)))
    denom = sum(mp_exp(mpf(float(s)) - shift) for s in scores)
    return float(-(mpf(float(scores[positive_index])) - shift - mp_log(denom)))


# ----------------------------------------------------------------------
# ranking and metric references
# ----------------------------------------------------------------------

def brute_rank(scores, target, candidates=None):
    """Pessimistic rank by explicit comparison loops."""
    pool = range(len(scores)) if candidates is None else candidates
    t = scores[target]
    rank = 1
    for j in pool:
        if scores[j] > t:
            rank += 1
        elif scores[j] == t and j != target:
            rank += 1
    return rank


def brute_metrics(ranks, cutoff):
    hits = 0
    rr = 0.0
    for r in ranks:
        if r <= cutoff:
            hits += 1
            rr += 1.0 / r
    n = len(ranks)
    return {"recall": hits / n, "mrr": rr / n, "precision": hits / n / cutoff}


# ----------------------------------------------------------------------
# co-occurrence similarity reference
# ----------------------------------------------------------------------

def brute_similarity(corpus):
    """Pairwise cosine over binary session incidence, via sets and loops."""
    sessions = [set(s.items) for _, s in corpus.iter_sessions()]
    n = corpus.n_items
    sims = np.zeros((n, n))
    support = [sum(1 for s in sessions if i in s) for i in range(n)]
    for a in range(n):
        for b in range(n):
            if a == b or support[a] == 0 or support[b] == 0:
                continue
            cooc = sum(1 for s in sessions if a in s and b in s)
            if cooc:
                sims[a, b] = cooc / np.sqrt(support[a] * support[b])
    return sims
