"""Hierarchical GRU recommender: a session-level GRU scores next items while a
user-level GRU evolves a cross-session user state.

When a session ends, the user state is updated from the session's last hidden
state (c_m = GRU_usr(s_m, c_{m-1}), with c_0 = 0); the next session's hidden
state is initialized as s0 = tanh(c_m W_init + b_init).  The "init" variant
uses the user state only for initialization; the "all" variant also feeds it
as an extra input at every within-session step, kept fixed for the session.

Training uses user-parallel mini-batches.  Session-level weights update every
step with gradients truncated at session starts; gradients reaching the user
state flow through the initialization map and one user-GRU step, and are
accumulated per lane until its session boundary, where the user-level weights
update (the per-step alternative is available via ``user_updates="step"``).
"""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .gru import gru_backward, gru_forward, gru_forward_items, init_gru
from .losses import LOSSES, in_batch_loss, score_activation
from .session_rnn import Batch, StepRecord, backward_through_session
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

VARIANTS = ("init", "all")


def user_parallel_batches(corpus, batch_size, rng):
    """Iterate (input, target) steps with each lane walking one user.

    A lane consumes its user's sessions in chronological order; sessions
    shorter than 2 events are skipped.  ``ends_session`` marks a session's
    last pair, ``ends_user`` the last pair of the user's last usable session,
    after which the next user (in shuffled order) occupies the lane.
    """
    users = []
    for user in corpus.users:
        sessions = [np.asarray(s.items, dtype=np.intp) for s in user.sessions if len(s.items) >= 2]
        if sessions:
            users.append(sessions)
    if not users:
        return
    order = rng.permutation(len(users))
    b = batch_size
    if len(users) < batch_size:
        b = len(users)
        logger.warning("only %d usable users; clamping batch size from %d to %d", b, batch_size, b)

    queue = iter(order)
    lane_user = [users[next(queue)] for _ in range(b)]
    lane_session = [0] * b
    lane_pos = [0] * b

    while any(u is not None for u in lane_user):
        inputs = np.zeros(b, dtype=np.intp)
        targets = np.zeros(b, dtype=np.intp)
        active = np.zeros(b, dtype=bool)
        fresh = np.zeros(b, dtype=bool)
        ends_session = np.zeros(b, dtype=bool)
        ends_user = np.zeros(b, dtype=bool)
        for lane in range(b):
            sessions = lane_user[lane]
            if sessions is None:
                continue
            session = sessions[lane_session[lane]]
            pos = lane_pos[lane]
            inputs[lane] = session[pos]
            targets[lane] = session[pos + 1]
            active[lane] = True
            fresh[lane] = pos == 0
            ends_session[lane] = pos + 2 == len(session)
            ends_user[lane] = ends_session[lane] and lane_session[lane] + 1 == len(sessions)
        yield Batch(inputs, targets, active, fresh, ends_session, ends_user)
        for lane in range(b):
            if lane_user[lane] is None:
                continue
            if not ends_session[lane]:
                lane_pos[lane] += 1
                continue
            lane_pos[lane] = 0
            if ends_user[lane]:
                nxt = next(queue, None)
                lane_user[lane] = users[nxt] if nxt is not None else None
                lane_session[lane] = 0
            else:
                lane_session[lane] += 1


class Hrnn(BaseEstimator):
    """Two-level GRU recommender with a persistent per-user state.

    Parameters
    ----------
    variant : str
        "init" uses the user state only to initialize each session's hidden
        state; "all" additionally feeds it as input at every session step.
    hidden_size : int
        Session-level hidden width.
    user_hidden_size : int or None
        User-level hidden width; defaults to hidden_size.
    loss : str
        top1 | bpr | xent.
    batch_size : int
        Number of parallel user lanes.
    epochs, learning_rate, momentum : training schedule (AdaGrad + momentum).
    dropout_user, dropout_session, dropout_init : float
        Dropout probabilities at the three sites: the user-level state after
        its update, the session-level state after each step, and the
        initialized session state.
    user_updates : str
        "boundary" accumulates user-level gradients within a session and
        applies them at the session boundary; "step" applies them every step.
    use_output_bias : bool
        Whether the output layer carries a bias term.
    seed : int
        Seed for initialization, shuffling, and dropout masks.
    """

    def __init__(self, variant="init", hidden_size=100, user_hidden_size=None,
                 loss="top1", batch_size=50, epochs=10, learning_rate=0.1,
                 momentum=0.0, dropout_user=0.0, dropout_session=0.0,
                 dropout_init=0.0, user_updates="boundary", use_output_bias=True,
                 seed=0):
        self.variant = variant
        self.hidden_size = hidden_size
        self.user_hidden_size = user_hidden_size
        self.loss = loss
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.dropout_user = dropout_user
        self.dropout_session = dropout_session
        self.dropout_init = dropout_init
        self.user_updates = user_updates
        self.use_output_bias = use_output_bias
        self.seed = seed

    def _validate(self):
        check_choice(self.variant, "variant", VARIANTS)
        check_positive_int(self.hidden_size, "hidden_size")
        if self.user_hidden_size is not None:
            check_positive_int(self.user_hidden_size, "user_hidden_size")
        check_choice(self.loss, "loss", LOSSES)
        check_positive_int(self.batch_size, "batch_size")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2: a lone user lane has no negatives")
        check_positive_int(self.epochs, "epochs")
        check_non_negative(self.learning_rate, "learning_rate")
        check_non_negative(self.momentum, "momentum")
        check_probability(self.dropout_user, "dropout_user")
        check_probability(self.dropout_session, "dropout_session")
        check_probability(self.dropout_init, "dropout_init")
        check_choice(self.user_updates, "user_updates", ("boundary", "step"))

    def _initialize(self, n_items, rng):
        d_ses = self.hidden_size
        d_usr = self.user_hidden_size if self.user_hidden_size is not None else d_ses
        input_rows = n_items + (d_usr if self.variant == "all" else 0)
        self.n_items_ = n_items
        self.user_size_ = d_usr
        self.session_gru_ = init_gru(rng, input_rows, d_ses)
        self.user_gru_ = init_gru(rng, d_ses, d_usr)
        self.init_w_ = glorot_uniform(rng, d_usr, d_ses)
        self.init_b_ = np.zeros(d_ses)
        self.output_w_ = glorot_uniform(rng, d_ses, n_items)
        self.output_b_ = np.zeros(n_items)

    def parameters(self):
        """Live (name -> array) view of all trainable parameters."""
        params = dict(self.session_gru_.named("ses."))
        params.update(self.user_gru_.named("usr."))
        params["init.w"] = self.init_w_
        params["init.b"] = self.init_b_
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
        d_ses, d_usr = self.hidden_size, self.user_size_
        usable = sum(1 for u in corpus.users if any(len(s.items) >= 2 for s in u.sessions))
        b = min(self.batch_size, max(1, usable))
        hidden = np.zeros((b, d_ses))
        user_state = np.zeros((b, d_usr))
        records = []
        ages = np.zeros(b, dtype=np.int64)
        boundary_tape = [None] * b
        boundary_mask = [None] * b
        init_rec = [None] * b
        dc_accum = np.zeros((b, d_usr))
        buf_init_w = np.zeros((b, d_usr, d_ses))
        buf_init_b = np.zeros((b, d_ses))
        loss_sum = 0.0
        n_rows = 0
        activation = score_activation(self.loss)

        def divert_to_init(lanes, d_rows):
            # gradient arriving at the (dropped) initialized session state
            for j, lane in enumerate(lanes):
                c_in, s0_raw, mask_row = init_rec[lane]
                d_s0 = d_rows[j] * mask_row if mask_row is not None else d_rows[j]
                d_pre = d_s0 * (1.0 - s0_raw * s0_raw)
                buf_init_b[lane] += d_pre
                buf_init_w[lane] += np.outer(c_in, d_pre)
                dc_accum[lane] += d_pre @ self.init_w_.T

        def flush_user_level(lanes, usr_grads, g_init_w, g_init_b):
            # move lane buffers into the shared user-level gradient arrays,
            # sending the accumulated user-state gradient through one step of
            # the user GRU (the boundary that produced the current state)
            for lane in lanes:
                g_init_w += buf_init_w[lane]
                g_init_b += buf_init_b[lane]
                buf_init_w[lane] = 0.0
                buf_init_b[lane] = 0.0
                if boundary_tape[lane] is not None and np.any(dc_accum[lane]):
                    d_c = dc_accum[lane]
                    if boundary_mask[lane] is not None:
                        d_c = d_c * boundary_mask[lane]
                    gru_backward(self.user_gru_, boundary_tape[lane], d_c[None, :], into=usr_grads)
                dc_accum[lane] = 0.0

        def apply_user_level(usr_grads, g_init_w, g_init_b):
            for name, param in self.user_gru_.named():
                optimizer.update("usr." + name, param, getattr(usr_grads, name))
            optimizer.update("init.w", self.init_w_, g_init_w)
            optimizer.update("init.b", self.init_b_, g_init_b)

        for batch in user_parallel_batches(corpus, self.batch_size, rng):
            fresh_lanes = np.flatnonzero(batch.fresh)
            if fresh_lanes.size:
                init_mask = dropout_mask(rng, (b, d_ses), self.dropout_init) if self.dropout_init > 0.0 else None
                s0_raw = np.tanh(user_state @ self.init_w_ + self.init_b_)
                s0 = s0_raw * init_mask if init_mask is not None else s0_raw
                hidden[fresh_lanes] = s0[fresh_lanes]
                for lane in fresh_lanes:
                    init_rec[lane] = (
                        user_state[lane].copy(),
                        s0_raw[lane].copy(),
                        init_mask[lane].copy() if init_mask is not None else None,
                    )
                ages[fresh_lanes] = 0

            extra = user_state.copy() if self.variant == "all" else None
            h_new, tape = gru_forward_items(self.session_gru_, batch.inputs, hidden, extra=extra)
            ses_mask = None
            if self.dropout_session > 0.0:
                ses_mask = dropout_mask(rng, (b, d_ses), self.dropout_session)
                h_new = h_new * ses_mask
            records.append(StepRecord(tape, ses_mask, batch.fresh.copy()))

            lanes = np.flatnonzero(batch.active)
            targets = batch.targets[lanes]
            logits = columns_affine(h_new[lanes], self.output_w_,
                                    self.output_b_ if self.use_output_bias else None, targets)
            scores = apply_activation(logits, activation)
            step_sum, rows, d_scores = in_batch_loss(scores, targets, self.loss)
            if not np.isfinite(step_sum):
                raise DivergenceError(f"non-finite loss {step_sum!r}; lower the learning rate")

            ses_grads = self.session_gru_.zeros_like()
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
                d_hidden = np.zeros((b, d_ses))
                d_hidden[lanes] = d_active
                on_extra = (lambda d_c: np.add(dc_accum, d_c, out=dc_accum)) if self.variant == "all" else None
                backward_through_session(self.session_gru_, records, d_hidden, ses_grads,
                                         on_session_start=divert_to_init, on_extra=on_extra)

            for name, param in self.session_gru_.named():
                optimizer.update("ses." + name, param, getattr(ses_grads, name))
            optimizer.update("out.w", self.output_w_, g_out_w)
            if self.use_output_bias:
                optimizer.update("out.b", self.output_b_, g_out_b)

            if self.user_updates == "step":
                usr_grads = self.user_gru_.zeros_like()
                g_init_w = np.zeros_like(self.init_w_)
                g_init_b = np.zeros_like(self.init_b_)
                flush_user_level(range(b), usr_grads, g_init_w, g_init_b)
                apply_user_level(usr_grads, g_init_w, g_init_b)

            ending = np.flatnonzero(batch.ends_session)
            if ending.size:
                if self.user_updates == "boundary":
                    usr_grads = self.user_gru_.zeros_like()
                    g_init_w = np.zeros_like(self.init_w_)
                    g_init_b = np.zeros_like(self.init_b_)
                    flush_user_level(ending, usr_grads, g_init_w, g_init_b)
                    apply_user_level(usr_grads, g_init_w, g_init_b)
                user_mask = dropout_mask(rng, (b, d_usr), self.dropout_user) if self.dropout_user > 0.0 else None
                for lane in ending:
                    if batch.ends_user[lane]:
                        # final state update is computed (evaluation replays it)
                        # but carries no gradient and the lane resets for the
                        # next user
                        gru_forward(self.user_gru_, h_new[[lane]], user_state[[lane]])
                        user_state[lane] = 0.0
                        boundary_tape[lane] = None
                        boundary_mask[lane] = None
                        init_rec[lane] = None
                        dc_accum[lane] = 0.0
                    else:
                        c_new, btape = gru_forward(self.user_gru_, h_new[[lane]], user_state[[lane]])
                        mask_row = user_mask[lane] if user_mask is not None else None
                        user_state[lane] = c_new[0] * mask_row if mask_row is not None else c_new[0]
                        boundary_tape[lane] = btape
                        boundary_mask[lane] = mask_row

            hidden = h_new
            ages += 1
            keep = int(ages[batch.active].max()) if np.any(batch.active) else 0
            if len(records) > keep:
                del records[: len(records) - keep]
            loss_sum += step_sum
            n_rows += rows
        return loss_sum / max(n_rows, 1)

    # ------------------------------------------------------------------
    # inference
    # ------------------------------------------------------------------

    def initial_user_state(self):
        check_is_fitted(self)
        return np.zeros((1, self.user_size_))

    def update_user_state(self, s_last, c_prev):
        """One user-GRU step: the session's last hidden state updates the user state."""
        check_is_fitted(self)
        c_new, _ = gru_forward(self.user_gru_, np.atleast_2d(s_last), np.atleast_2d(c_prev))
        return c_new

    def init_session_state(self, c):
        """Session-state initialization: s0 = tanh(c W_init + b_init)."""
        check_is_fitted(self)
        return np.tanh(np.atleast_2d(c) @ self.init_w_ + self.init_b_)

    def _step_state(self, item_index, s_prev, c_fixed):
        extra = np.atleast_2d(c_fixed) if self.variant == "all" else None
        h, _ = gru_forward_items(self.session_gru_, np.asarray([item_index], dtype=np.intp),
                                 s_prev, extra=extra)
        return h

    def hrnn_step(self, item_index, s_prev, c_fixed):
        """Consume one item and score the full catalog.

        ``c_fixed`` is the user state frozen at session start; it is read (as
        extra input, for the "all" variant) but never modified here.
        """
        check_is_fitted(self)
        if not 0 <= item_index < self.n_items_:
            raise ValueError(f"item index {item_index} out of range [0, {self.n_items_})")
        h = self._step_state(item_index, s_prev, c_fixed)
        logits = columns_affine(h, self.output_w_,
                                self.output_b_ if self.use_output_bias else None,
                                np.arange(self.n_items_))
        scores = apply_activation(logits, score_activation(self.loss))
        return scores[0], h

    def bootstrap_user(self, sessions):
        """Replay historical sessions and return the post-history user state."""
        check_is_fitted(self)
        c = self.initial_user_state()
        for session in sessions:
            s = self.init_session_state(c)
            for item in session.items:
                s = self._step_state(item, s, c)
            c = self.update_user_state(s, c)
        return c


def stream_loss_and_gradients(model, corpus, batch_size=2, compute_gradients=True):
    """Total mean loss over a corpus with full backpropagation.

    Unlike training (which truncates at session starts and one user-GRU step),
    this propagates every path: within-session unrolls, the initialization map,
    user-GRU steps across all boundaries, and (for the "all" variant) the
    per-step user-state inputs.  No dropout, no updates.  Used to verify the
    backward implementation against finite differences of the same loss.

    Returns (mean_loss, grads) with grads keyed like ``model.parameters()``
    (omitting gradients when ``compute_gradients`` is False).
    """
    d_ses, d_usr = model.hidden_size, model.user_size_
    variant_all = model.variant == "all"
    activation = score_activation(model.loss)

    usable = sum(1 for u in corpus.users if any(len(s.items) >= 2 for s in u.sessions))
    b = min(batch_size, max(1, usable))
    hidden = np.zeros((b, d_ses))
    user_state = np.zeros((b, d_usr))
    first_session = np.ones(b, dtype=bool)

    grads = {name: np.zeros_like(arr) for name, arr in model.parameters().items()}
    steps = []
    loss_sum = 0.0
    n_rows = 0

    for batch in user_parallel_batches(corpus, batch_size, make_rng(0)):
        rec = {
            "fresh": batch.fresh.copy(),
            "ends_user": batch.ends_user.copy(),
            "init_c": None,
            "init_s0": None,
            "init_first": None,
            "boundaries": [],
        }
        fresh_lanes = np.flatnonzero(batch.fresh)
        if fresh_lanes.size:
            s0 = np.tanh(user_state @ model.init_w_ + model.init_b_)
            hidden[fresh_lanes] = s0[fresh_lanes]
            rec["init_c"] = user_state.copy()
            rec["init_s0"] = s0
            rec["init_first"] = first_session.copy()

        extra = user_state.copy() if variant_all else None
        h_new, tape = gru_forward_items(model.session_gru_, batch.inputs, hidden, extra=extra)
        rec["tape"] = tape

        lanes = np.flatnonzero(batch.active)
        targets = batch.targets[lanes]
        logits = columns_affine(h_new[lanes], model.output_w_,
                                model.output_b_ if model.use_output_bias else None, targets)
        scores = apply_activation(logits, activation)
        step_sum, rows, d_scores = in_batch_loss(scores, targets, model.loss)
        loss_sum += step_sum
        n_rows += rows

        d_h_step = np.zeros((b, d_ses))
        if compute_gradients and rows > 0:
            d_logits = d_scores
            if activation == "tanh":
                d_logits = d_logits * (1.0 - scores * scores)
            w_cols = model.output_w_[:, targets]
            d_h_step[lanes] = d_logits @ w_cols.T
            np.add.at(grads["out.w"].T, targets, (h_new[lanes].T @ d_logits).T)
            if model.use_output_bias:
                np.add.at(grads["out.b"], targets, d_logits.sum(axis=0))
        rec["d_h"] = d_h_step

        for lane in np.flatnonzero(batch.ends_session):
            if batch.ends_user[lane]:
                user_state[lane] = 0.0
                first_session[lane] = True
            else:
                c_new, btape = gru_forward(model.user_gru_, h_new[[lane]], user_state[[lane]])
                user_state[lane] = c_new[0]
                rec["boundaries"].append((lane, btape))
                first_session[lane] = False

        hidden = h_new
        steps.append(rec)

    total_rows = max(n_rows, 1)
    mean_loss = loss_sum / total_rows
    if not compute_gradients:
        return mean_loss, {}

    # Backward sweep in reverse step order, carrying gradients on the session
    # state (d_hidden) and the user state (d_user) per lane.
    d_hidden = np.zeros((b, d_ses))
    d_user = np.zeros((b, d_usr))
    ses_grads = model.session_gru_.zeros_like()
    usr_grads = model.user_gru_.zeros_like()
    for rec in reversed(steps):
        for lane, btape in rec["boundaries"]:
            _, d_s_last, d_c_prev = gru_backward(model.user_gru_, btape, d_user[[lane]], into=usr_grads)
            d_hidden[lane] += d_s_last[0]
            d_user[lane] = d_c_prev[0]
        ended = np.flatnonzero(rec["ends_user"])
        if ended.size:
            # the discarded final user update carries no gradient; any carry
            # from the next user's chain was already cut at its first session
            d_hidden[ended] = 0.0
            d_user[ended] = 0.0

        d_total = rec["d_h"] + d_hidden
        _, d_extra, d_prev = gru_backward(model.session_gru_, rec["tape"], d_total, into=ses_grads)
        if variant_all and d_extra is not None:
            d_user += d_extra

        fresh_lanes = np.flatnonzero(rec["fresh"])
        if fresh_lanes.size:
            s0 = rec["init_s0"][fresh_lanes]
            d_pre = d_prev[fresh_lanes] * (1.0 - s0 * s0)
            grads["init.b"] += d_pre.sum(axis=0)
            grads["init.w"] += rec["init_c"][fresh_lanes].T @ d_pre
            d_c_rows = d_pre @ model.init_w_.T
            for j, lane in enumerate(fresh_lanes):
                if rec["init_first"][lane]:
                    d_user[lane] = 0.0
                else:
                    d_user[lane] += d_c_rows[j]
            d_prev[fresh_lanes] = 0.0
        d_hidden = d_prev

    for name, arr in ses_grads.named("ses."):
        grads[name] += arr
    for name, arr in usr_grads.named("usr."):
        grads[name] += arr
    for name in grads:
        grads[name] /= total_rows
    return mean_loss, grads
