"""Session-only GRU recommender with session-parallel mini-batch training.

Each mini-batch lane walks one session; the current item is the input and the
next item the target.  Scores are computed only for the batch's target items,
with the other lanes' targets acting as negatives.  When a session ends the
lane's hidden state is reset to zero and a fresh session occupies the lane, so
gradients never cross session boundaries.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .gru import gru_backward, gru_forward_items, init_gru
from .losses import LOSSES, in_batch_loss, score_activation
from .tensor_math import (
    AdagradMomentum,
    apply_activation,
    columns_affine,
    dropout_mask,
    glorot_uniform,
    make_rng,
)
from .validation import (
    DivergenceError,
    check_choice,
    check_corpus,
    check_non_negative,
    check_positive_int,
    check_probability,
)

logger = logging.getLogger(__name__)


@dataclass
class Batch:
    """One step of a lane-parallel iterator.

    ``active`` marks lanes currently walking a session (inactive lanes appear
    only when the pool runs dry near the epoch's end and carry index 0 as a
    harmless placeholder).  ``fresh`` marks lanes emitting the first pair of a
    session, ``ends_session`` lanes emitting its last pair.  ``ends_user`` is
    used by the user-parallel iterator and None otherwise.
    """

    inputs: np.ndarray
    targets: np.ndarray
    active: np.ndarray
    fresh: np.ndarray
    ends_session: np.ndarray
    ends_user: np.ndarray | None = None


def session_parallel_batches(corpus, batch_size, rng):
    """Iterate (input, target) steps over all sessions, B lanes in parallel.

    Sessions from all users are pooled and their order shuffled with ``rng``;
    sessions shorter than 2 events emit no pairs and are skipped.  Every
    session of length N contributes exactly N - 1 targets per epoch.
    """
    sessions = [np.asarray(s.items, dtype=np.intp) for _, s in corpus.iter_sessions() if len(s.items) >= 2]
    if not sessions:
        return
    order = rng.permutation(len(sessions))
    b = batch_size
    if len(sessions) < batch_size:
        b = len(sessions)
        logger.warning("only %d usable sessions; clamping batch size from %d to %d", b, batch_size, b)

    queue = iter(order)
    lane_session = [sessions[next(queue)] for _ in range(b)]
    lane_pos = [0] * b

    while any(s is not None for s in lane_session):
        inputs = np.zeros(b, dtype=np.intp)
        targets = np.zeros(b, dtype=np.intp)
        active = np.zeros(b, dtype=bool)
        fresh = np.zeros(b, dtype=bool)
        ends = np.zeros(b, dtype=bool)
        for lane in range(b):
            session = lane_session[lane]
            if session is None:
                continue
            pos = lane_pos[lane]
            inputs[lane] = session[pos]
            targets[lane] = session[pos + 1]
            active[lane] = True
            fresh[lane] = pos == 0
            ends[lane] = pos + 2 == len(session)
        yield Batch(inputs, targets, active, fresh, ends)
        for lane in range(b):
            if lane_session[lane] is None:
                continue
            if ends[lane]:
                nxt = next(queue, None)
                lane_session[lane] = sessions[nxt] if nxt is not None else None
                lane_pos[lane] = 0
            else:
                lane_pos[lane] += 1


@dataclass
class StepRecord:
    """Per-step state kept for the within-session backward pass."""

    tape: object
    drop_mask: np.ndarray | None
    fresh: np.ndarray


def backward_through_session(params, records, d_h, grads, on_session_start=None,
                             on_extra=None):
    """Backpropagate ``d_h`` (gradient on the newest dropped hidden state)
    through the recorded steps, stopping at each lane's session start.

    ``on_session_start(lane_rows, d_rows)`` is called with the gradient that
    reaches the pre-session hidden state of freshly started lanes; without a
    callback that gradient is discarded (the state was a constant reset).
    ``on_extra(d_extra)`` receives the gradient on each step's dense extra
    input when the tapes carry one (rows for lanes outside the gradient's
    session window are zero).  Returns nothing; parameter gradients accumulate
    into ``grads``.
    """
    for record in reversed(records):
        if not np.any(d_h):
            return
        d_raw = d_h * record.drop_mask if record.drop_mask is not None else d_h
        _, d_extra, d_prev = gru_backward(params, record.tape, d_raw, into=grads)
        if on_extra is not None and d_extra is not None:
            on_extra(d_extra)
        started = record.fresh & np.any(d_prev != 0.0, axis=1)
        if np.any(started):
            lanes = np.flatnonzero(started)
            if on_session_start is not None:
                on_session_start(lanes, d_prev[lanes])
            d_prev[lanes] = 0.0
        d_h = d_prev


class SessionRnn(BaseEstimator):
    """GRU session model scoring the whole catalog for next-item prediction.

    Parameters
    ----------
    hidden_size : int
        Width of the GRU hidden state.
    loss : str
        One of top1 | bpr | xent; top1 and bpr score through tanh, xent
        applies softmax inside the loss.
    batch_size : int
        Number of parallel session lanes (also the negative-sample count + 1).
    epochs : int
        Training epochs.
    learning_rate, momentum : float
        AdaGrad step size and classical momentum on the preconditioned step.
    dropout_hidden : float
        Dropout probability on the hidden state after each step.
    use_output_bias : bool
        Keep False to drop the output bias term (it is not part of the scored
        model family; kept as an explicit knob).
    seed : int
        Seed for initialization, shuffling, and dropout masks.
    """

    def __init__(self, hidden_size=100, loss="top1", batch_size=50, epochs=10,
                 learning_rate=0.1, momentum=0.0, dropout_hidden=0.0,
                 use_output_bias=True, seed=0):
        self.hidden_size = hidden_size
        self.loss = loss
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.dropout_hidden = dropout_hidden
        self.use_output_bias = use_output_bias
        self.seed = seed

    def _validate(self):
        check_positive_int(self.hidden_size, "hidden_size")
        check_choice(self.loss, "loss", LOSSES)
        check_positive_int(self.batch_size, "batch_size")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2: a lone session lane has no negatives")
        check_positive_int(self.epochs, "epochs")
        check_non_negative(self.learning_rate, "learning_rate")
        check_non_negative(self.momentum, "momentum")
        check_probability(self.dropout_hidden, "dropout_hidden")

    def _initialize(self, n_items, rng):
        self.n_items_ = n_items
        self.gru_ = init_gru(rng, n_items, self.hidden_size)
        self.output_w_ = glorot_uniform(rng, self.hidden_size, n_items)
        self.output_b_ = np.zeros(n_items)

    def parameters(self):
        """Live (name -> array) view of all trainable parameters."""
        params = dict(self.gru_.named("gru."))
        params["out.w"] = self.output_w_
        if self.use_output_bias:
            params["out.b"] = self.output_b_
        return params

    def fit(self, corpus):
        self._validate()
        check_corpus(corpus)
        rng = make_rng(self.seed)
        self._initialize(corpus.n_items, rng)
        self.vocab_hash_ = corpus.item_vocab.content_hash()
        optimizer = AdagradMomentum(self.learning_rate, self.momentum)
        self.train_loss_per_epoch_ = []
        for epoch in range(self.epochs):
            mean_loss = self._run_epoch(corpus, rng, optimizer)
            self.train_loss_per_epoch_.append(mean_loss)
            logger.info("epoch %d/%d  loss %.6f", epoch + 1, self.epochs, mean_loss)
        return self

    def _run_epoch(self, corpus, rng, optimizer):
        d_h = self.hidden_size
        b = min(self.batch_size, max(1, sum(1 for _, s in corpus.iter_sessions() if len(s.items) >= 2)))
        hidden = np.zeros((b, d_h))
        records = []
        ages = np.zeros(b, dtype=np.int64)
        loss_sum = 0.0
        n_rows = 0
        activation = score_activation(self.loss)

        for batch in session_parallel_batches(corpus, self.batch_size, rng):
            hidden[batch.fresh] = 0.0
            ages[batch.fresh] = 0
            h_new, tape = gru_forward_items(self.gru_, batch.inputs, hidden)
            mask = None
            if self.dropout_hidden > 0.0:
                mask = dropout_mask(rng, (b, d_h), self.dropout_hidden)
                h_new = h_new * mask
            records.append(StepRecord(tape, mask, batch.fresh.copy()))

            lanes = np.flatnonzero(batch.active)
            targets = batch.targets[lanes]
            logits = columns_affine(h_new[lanes], self.output_w_,
                                    self.output_b_ if self.use_output_bias else None, targets)
            scores = apply_activation(logits, activation)
            step_sum, rows, d_scores = in_batch_loss(scores, targets, self.loss)
            if not np.isfinite(step_sum):
                raise DivergenceError(f"non-finite loss {step_sum!r}; lower the learning rate")
            grads = self.gru_.zeros_like()
            g_out_w = np.zeros_like(self.output_w_)
            g_out_b = np.zeros_like(self.output_b_)
            if rows > 0:
                d_logits = d_scores / rows
                if activation == "tanh":
                    d_logits = d_logits * (1.0 - scores * scores)
                w_cols = self.output_w_[:, targets]
                d_active = d_logits @ w_cols.T
                np.add.at(g_out_w.T, targets, (h_new[lanes].T @ d_logits).T)
                np.add.at(g_out_b, targets, d_logits.sum(axis=0))
                d_hidden = np.zeros((b, d_h))
                d_hidden[lanes] = d_active
                backward_through_session(self.gru_, records, d_hidden, grads)

            for name, param in self.gru_.named():
                optimizer.update("gru." + name, param, getattr(grads, name))
            optimizer.update("out.w", self.output_w_, g_out_w)
            if self.use_output_bias:
                optimizer.update("out.b", self.output_b_, g_out_b)

            hidden = h_new
            ages += 1
            keep = int(ages[batch.active].max()) if np.any(batch.active) else 0
            if len(records) > keep:
                del records[: len(records) - keep]
            loss_sum += step_sum
            n_rows += rows
        return loss_sum / max(n_rows, 1)

    def initial_state(self):
        check_is_fitted(self)
        return np.zeros((1, self.hidden_size))

    def score_step(self, item_index, state):
        """Consume one item and score the full catalog.

        Returns (scores, new_state); scores pass through the loss's output
        activation (monotone per row, so rankings match raw logits).
        """
        check_is_fitted(self)
        if not 0 <= item_index < self.n_items_:
            raise ValueError(f"item index {item_index} out of range [0, {self.n_items_})")
        h, _ = gru_forward_items(self.gru_, np.asarray([item_index], dtype=np.intp), state)
        logits = columns_affine(h, self.output_w_,
                                self.output_b_ if self.use_output_bias else None,
                                np.arange(self.n_items_))
        scores = apply_activation(logits, score_activation(self.loss))
        return scores[0], h

    def advance_state(self, item_index, state):
        """Consume one item without scoring (history replay is scoring-free)."""
        check_is_fitted(self)
        h, _ = gru_forward_items(self.gru_, np.asarray([item_index], dtype=np.intp), state)
        return h
