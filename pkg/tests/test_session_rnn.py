"""Session-parallel iterator and the session-only GRU recommender.

The training loop's backward pass is verified by freezing the parameters
(learning rate zero), capturing the per-step gradients the optimizer would
apply, and comparing their sum against central finite differences of the
replayed epoch loss.
"""

import numpy as np
import pytest

import sessrec.session_rnn as session_rnn_module
from oracles import rel_err
from sessrec.losses import in_batch_loss
from sessrec.session_rnn import Batch, SessionRnn, session_parallel_batches
from sessrec.synthetic import corpus_from_item_lists, random_corpus, successor_events
from sessrec.corpus import SplitSpec, preprocess_events
from sessrec.tensor_math import AdagradMomentum, make_rng
from sessrec.validation import DivergenceError


def _usable_pairs(corpus):
    return sum(len(s.items) - 1 for _, s in corpus.iter_sessions() if len(s.items) >= 2)


# ----------------------------------------------------------------------
# iterator
# ----------------------------------------------------------------------

def test_iterator_emits_every_pair_exactly_once():
    rng = make_rng(0)
    for _ in range(25):
        corpus = random_corpus(rng, n_users=4, n_items=10, max_sessions=4, max_len=6)
        batch_size = int(rng.integers(2, 6))
        seen = {}
        for batch in session_parallel_batches(corpus, batch_size, make_rng(1)):
            for lane in np.flatnonzero(batch.active):
                key = (int(batch.inputs[lane]), int(batch.targets[lane]))
                seen[key] = seen.get(key, 0) + 1
        want = {}
        for _, session in corpus.iter_sessions():
            for a, b in zip(session.items, session.items[1:]):
                want[(a, b)] = want.get((a, b), 0) + 1
        assert seen == want


def test_iterator_flags_mark_session_starts_and_ends():
    corpus = corpus_from_item_lists([[[0, 1, 2, 3]], [[1, 2]]], 4)
    batches = list(session_parallel_batches(corpus, 2, make_rng(0)))
    # lanes walk one session each; track each lane's step index
    ages = {}
    for batch in batches:
        for lane in np.flatnonzero(batch.active):
            age = ages.get(lane, 0)
            assert bool(batch.fresh[lane]) == (age == 0)
            if batch.ends_session[lane]:
                ages[lane] = 0
            else:
                ages[lane] = age + 1
    # all lanes closed their sessions
    assert all(a == 0 for a in ages.values())


def test_iterator_skips_single_event_sessions():
    corpus = corpus_from_item_lists([[[5], [0, 1]], [[3]]], 6)
    batches = list(session_parallel_batches(corpus, 2, make_rng(0)))
    total = sum(int(np.count_nonzero(b.active)) for b in batches)
    assert total == 1  # only the two-event session emits a pair


def test_iterator_clamps_batch_size_with_warning(caplog):
    corpus = corpus_from_item_lists([[[0, 1, 2]]], 3)
    with caplog.at_level("WARNING"):
        batches = list(session_parallel_batches(corpus, 50, make_rng(0)))
    assert any("clamping" in rec.message for rec in caplog.records)
    assert all(b.inputs.shape == (1,) for b in batches)


def test_iterator_is_deterministic_per_seed():
    corpus = random_corpus(make_rng(2), n_users=5, n_items=8)
    a = [(b.inputs.tolist(), b.targets.tolist(), b.active.tolist())
         for b in session_parallel_batches(corpus, 3, make_rng(7))]
    b = [(b.inputs.tolist(), b.targets.tolist(), b.active.tolist())
         for b in session_parallel_batches(corpus, 3, make_rng(7))]
    assert a == b


# ----------------------------------------------------------------------
# training-path gradients
# ----------------------------------------------------------------------

class _CapturingOptimizer(AdagradMomentum):
    """Records gradient sums per parameter name; with lr=0 parameters are
    frozen, so the sums correspond to one fixed-parameter epoch."""

    captured = None

    def update(self, name, param, grad):
        store = type(self).captured
        if name in store:
            store[name] = store[name] + grad
        else:
            store[name] = np.array(grad, dtype=np.float64)
        super().update(name, param, grad)


class _PinnedRnn(SessionRnn):
    """Overwrites freshly initialized parameters with pinned values while
    consuming the same number of seed draws (keeping batch order intact)."""

    pinned = None

    def _initialize(self, n_items, rng):
        super()._initialize(n_items, rng)
        for name, arr in self.parameters().items():
            arr[...] = type(self).pinned[name]


def _epoch_loss_and_grads(corpus, pinned, monkeypatch, dropout=0.0):
    """Run one frozen epoch; return (sum of per-step mean losses, grad sums)."""
    _CapturingOptimizer.captured = {}
    _PinnedRnn.pinned = pinned
    step_losses = []

    def recording_loss(scores, targets, loss):
        total, rows, d = in_batch_loss(scores, targets, loss)
        step_losses.append((total, rows))
        return total, rows, d

    monkeypatch.setattr(session_rnn_module, "AdagradMomentum", _CapturingOptimizer)
    monkeypatch.setattr(session_rnn_module, "in_batch_loss", recording_loss)
    model = _PinnedRnn(hidden_size=3, loss="top1", batch_size=2, epochs=1,
                       learning_rate=0.0, dropout_hidden=dropout, seed=5)
    model.fit(corpus)
    objective = sum(total / rows for total, rows in step_losses if rows > 0)
    return objective, _CapturingOptimizer.captured


@pytest.mark.parametrize("dropout", [0.0, 0.35])
def test_training_gradients_match_finite_differences(monkeypatch, dropout):
    corpus = corpus_from_item_lists(
        [[[0, 1, 2], [2, 3, 0]], [[1, 3, 2], [3, 0, 1]]], 4)
    rng = make_rng(9)
    template = SessionRnn(hidden_size=3, batch_size=2, seed=5)
    template._initialize(4, make_rng(5))
    pinned = {name: arr + 0.3 * rng.standard_normal(arr.shape)
              for name, arr in template.parameters().items()}

    _, grads = _epoch_loss_and_grads(corpus, pinned, monkeypatch, dropout)
    h = 1e-5
    for name, arr in pinned.items():
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up, _ = _epoch_loss_and_grads(corpus, pinned, monkeypatch, dropout)
            arr[idx] = orig - h
            down, _ = _epoch_loss_and_grads(corpus, pinned, monkeypatch, dropout)
            arr[idx] = orig
            fd = (up - down) / (2 * h)
            assert rel_err(fd, grads[name][idx]) < 1e-5, (name, idx, fd, grads[name][idx])


# ----------------------------------------------------------------------
# estimator behavior
# ----------------------------------------------------------------------

def _successor_corpus(seed=0):
    events = successor_events(n_users=12, n_items=10, n_sessions=6, session_len=4, seed=seed)
    train, _, _ = preprocess_events(events, SplitSpec())
    return train


def test_loss_decreases_on_learnable_structure():
    corpus = _successor_corpus()
    model = SessionRnn(hidden_size=12, batch_size=6, epochs=3, learning_rate=0.1,
                       seed=0).fit(corpus)
    losses = model.train_loss_per_epoch_
    assert len(losses) == 3
    assert losses[2] < losses[0]


def test_fit_is_deterministic_per_seed():
    corpus = _successor_corpus()
    a = SessionRnn(hidden_size=6, batch_size=4, epochs=2, dropout_hidden=0.2, seed=3).fit(corpus)
    b = SessionRnn(hidden_size=6, batch_size=4, epochs=2, dropout_hidden=0.2, seed=3).fit(corpus)
    c = SessionRnn(hidden_size=6, batch_size=4, epochs=2, dropout_hidden=0.2, seed=4).fit(corpus)
    for name, arr in a.parameters().items():
        assert arr.tobytes() == b.parameters()[name].tobytes()
    assert any(a.parameters()[n].tobytes() != c.parameters()[n].tobytes()
               for n in a.parameters())
    assert a.train_loss_per_epoch_ == b.train_loss_per_epoch_


def test_score_step_shapes_and_state_advance():
    corpus = _successor_corpus()
    model = SessionRnn(hidden_size=6, batch_size=4, epochs=1, seed=0).fit(corpus)
    state = model.initial_state()
    assert state.shape == (1, 6) and np.all(state == 0.0)
    scores, new_state = model.score_step(3, state)
    assert scores.shape == (model.n_items_,)
    assert new_state.shape == (1, 6)
    assert not np.array_equal(new_state, state)
    assert np.array_equal(model.advance_state(3, state), new_state)
    with pytest.raises(ValueError):
        model.score_step(model.n_items_, state)


def test_scores_respect_loss_activation_range():
    corpus = _successor_corpus()
    model = SessionRnn(hidden_size=5, batch_size=4, epochs=1, loss="top1", seed=0).fit(corpus)
    scores, _ = model.score_step(0, model.initial_state())
    assert np.all(scores > -1.0) and np.all(scores < 1.0)  # tanh output


def test_divergence_guard_raises():
    corpus = corpus_from_item_lists([[[0, 1, 2], [1, 2, 0]], [[2, 0, 1], [0, 2, 1]]], 3)
    model = SessionRnn(hidden_size=3, batch_size=2, epochs=1, loss="xent", seed=0)
    model._initialize(3, make_rng(0))
    model.output_w_[:] = np.inf
    with np.errstate(invalid="ignore"), pytest.raises(DivergenceError):
        model._run_epoch(corpus, make_rng(0), AdagradMomentum(0.1))


def test_constructor_validation():
    corpus = corpus_from_item_lists([[[0, 1]]], 2)
    with pytest.raises(ValueError):
        SessionRnn(batch_size=1).fit(corpus)
    with pytest.raises(ValueError):
        SessionRnn(loss="hinge").fit(corpus)
    with pytest.raises(ValueError):
        SessionRnn(dropout_hidden=1.0).fit(corpus)
    with pytest.raises(ValueError):
        SessionRnn(hidden_size=0).fit(corpus)
