"""Pairwise and listwise ranking losses over a positive and sampled negatives.

Each loss consumes the score of the target item (positive) and the scores of
sampled negative items, and returns both the loss value and its gradient with
respect to those scores.  During training the negatives for a mini-batch lane
are the target items of the other lanes; ``in_batch_loss`` assembles that
arrangement from a square score matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .tensor_math import softmax_rows

LOSSES = ("top1", "bpr", "xent")


@dataclass
class ScoreRow:
    """Scores for one training example: the positive and its negatives."""

    positive: float
    negatives: np.ndarray


def score_activation(loss):
    """Final activation applied to logits before the loss sees them.

    top1 and bpr operate on tanh scores; xent applies its own softmax and
    therefore consumes raw logits.
    """
    if loss in ("top1", "bpr"):
        return "tanh"
    if loss == "xent":
        return "identity"
    raise ValueError(f"unknown loss {loss!r}; expected one of {LOSSES}")


def _top1_parts(positive, negatives):
    """Rank term and score-regularization term of TOP1, averaged over negatives."""
    rank = expit(negatives - positive)
    reg = expit(negatives * negatives)
    n = negatives.shape[0]
    return rank.sum() / n, reg.sum() / n


def top1_loss(row):
    """TOP1: mean over negatives of sigmoid(r_j - r_i) + sigmoid(r_j^2).

    Returns (loss, d_positive, d_negatives).
    """
    negatives = np.asarray(row.negatives, dtype=np.float64)
    if negatives.size == 0:
        raise ValueError("top1_loss needs at least one negative score")
    n = negatives.shape[0]
    rank = expit(negatives - row.positive)
    reg = expit(negatives * negatives)
    loss = (rank.sum() + reg.sum()) / n
    d_rank = rank * (1.0 - rank)
    d_positive = -d_rank.sum() / n
    d_negatives = (d_rank + 2.0 * negatives * reg * (1.0 - reg)) / n
    return loss, d_positive, d_negatives


def bpr_loss(row):
    """BPR: -mean over negatives of log sigmoid(r_i - r_j).

    Uses log(1 + exp(-d)) = logaddexp(0, -d) for numerical stability.
    Returns (loss, d_positive, d_negatives).
    """
    negatives = np.asarray(row.negatives, dtype=np.float64)
    if negatives.size == 0:
        raise ValueError("bpr_loss needs at least one negative score")
    n = negatives.shape[0]
    diff = row.positive - negatives
    loss = np.logaddexp(0.0, -diff).sum() / n
    # d/dd of -log sigmoid(d) is sigmoid(d) - 1 = -sigmoid(-d)
    s = expit(-diff)
    d_positive = -s.sum() / n
    d_negatives = s / n
    return loss, d_positive, d_negatives


def xent_loss(scores, positive_index):
    """Cross-entropy over the sampled set: -log softmax(scores)[positive].

    ``scores`` holds the positive and negative scores together as raw logits.
    Returns (loss, d_scores).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size < 2:
        raise ValueError("xent_loss expects a 1-D score vector with at least 2 entries")
    shifted = scores - scores.max()
    log_norm = np.log(np.exp(shifted).sum())
    loss = log_norm - shifted[positive_index]
    d_scores = np.exp(shifted - log_norm)
    d_scores[positive_index] -= 1.0
    return loss, d_scores


def in_batch_loss(scores, targets, loss):
    """Loss and gradient for in-batch negative sampling.

    ``scores[i, j]`` is lane i's score for lane j's target item; diagonal
    entries are the positives.  For lane i the negatives are the other lanes'
    targets, except those equal to lane i's own target (scoring the positive
    as its own negative would fight itself; duplicates of it are copies of the
    same mistake and are excluded from the rank comparison and the softmax).
    Lanes whose negative set is empty contribute nothing.

    Returns (loss_sum, rows_counted, d_scores) where loss_sum is the sum of
    per-lane losses and d_scores the gradient of that sum.
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    b = scores.shape[0]
    if scores.shape != (b, b) or targets.shape != (b,):
        raise ValueError(f"expected square scores and {b} targets, got {scores.shape}, {targets.shape}")

    neg = targets[None, :] != targets[:, None]  # excludes the diagonal too
    counts = neg.sum(axis=1)
    live = counts > 0
    rows = int(live.sum())
    d_scores = np.zeros_like(scores)
    if rows == 0:
        return 0.0, 0, d_scores
    safe = np.where(live, counts, 1).astype(np.float64)
    pos = np.diagonal(scores).copy()

    if loss == "top1":
        rank = expit(scores - pos[:, None])
        reg = expit(scores * scores)
        row_loss = ((rank + reg) * neg).sum(axis=1) / safe
        d_rank = rank * (1.0 - rank)
        d_scores = (d_rank + 2.0 * scores * reg * (1.0 - reg)) * neg / safe[:, None]
        d_diag = -(d_rank * neg).sum(axis=1) / safe
        d_scores[np.arange(b), np.arange(b)] = d_diag
    elif loss == "bpr":
        diff = pos[:, None] - scores
        row_loss = (np.logaddexp(0.0, -diff) * neg).sum(axis=1) / safe
        s = expit(-diff)
        d_scores = s * neg / safe[:, None]
        d_scores[np.arange(b), np.arange(b)] = -(s * neg).sum(axis=1) / safe
    elif loss == "xent":
        member = neg.copy()
        member[np.arange(b), np.arange(b)] = True
        masked = np.where(member, scores, -np.inf)
        shifted = masked - masked.max(axis=1, keepdims=True)
        norm = np.exp(shifted).sum(axis=1)
        row_loss = np.log(norm) - shifted[np.arange(b), np.arange(b)]
        d_scores = np.where(member, np.exp(shifted) / norm[:, None], 0.0)
        d_scores[np.arange(b), np.arange(b)] -= 1.0
    else:
        raise ValueError(f"unknown loss {loss!r}; expected one of {LOSSES}")

    row_loss = np.where(live, row_loss, 0.0)
    d_scores[~live] = 0.0
    return float(row_loss.sum()), rows, d_scores
