"""Event-log ingestion, sessionization, filtering, splitting, and the on-disk
corpus format."""

import json
import os

import numpy as np
import pytest

from sessrec.corpus import (
    CORPUS_MAGIC,
    Corpus,
    ItemVocab,
    RawEvent,
    Session,
    SplitSpec,
    UserHistory,
    corpus_stats,
    derive_validation,
    filter_corpus,
    flatten_histories,
    load_corpus_dir,
    load_events,
    preprocess_events,
    read_corpus_file,
    sessionize,
    split_last_session,
    write_corpus_dir,
    write_corpus_file,
)
from sessrec.synthetic import archetype_events, corpus_from_item_lists
from sessrec.tensor_math import make_rng
from sessrec.validation import CorpusFormatError


def _ev(user, item, ts, kind="click"):
    return RawEvent(str(user), str(item), ts, kind)


# ----------------------------------------------------------------------
# load_events
# ----------------------------------------------------------------------

def test_load_events_sniffs_header(tmp_path):
    p = tmp_path / "events.tsv"
    p.write_text("user_id\titem_id\ttimestamp\tinteraction_type\n"
                 "u1\ti1\t100\tclick\n"
                 "u1\ti2\t160\tclick\n")
    events = load_events(str(p))
    assert len(events) == 2
    assert events[0] == RawEvent("u1", "i1", 100, "click")


def test_load_events_without_header(tmp_path):
    p = tmp_path / "events.tsv"
    p.write_text("u1\ti1\t100\tclick\nu2\ti9\t400\tbookmark\n")
    events = load_events(str(p))
    assert len(events) == 2
    assert events[1].interaction_type == "bookmark"


def test_load_events_skips_malformed_rows(tmp_path, caplog):
    p = tmp_path / "events.tsv"
    p.write_text("u1\ti1\t100\tclick\n"
                 "only\ttwo\n"
                 "u1\t\t200\tclick\n"
                 "u1\ti2\t300\tclick\n")
    events = load_events(str(p))
    assert [e.item_id for e in events] == ["i1", "i2"]


def test_load_events_rejects_bad_timestamp(tmp_path):
    p = tmp_path / "events.tsv"
    # line 1 looks like a header to the sniffer; the bad row must still raise
    p.write_text("u1\ti1\t100\tclick\nu1\ti2\tnoon\tclick\n")
    with pytest.raises(CorpusFormatError) as err:
        load_events(str(p))
    assert "events.tsv:2" in str(err.value)
    # with header=False even the first line is data
    q = tmp_path / "raw.tsv"
    q.write_text("u1\ti1\tnoon\tclick\n")
    with pytest.raises(CorpusFormatError):
        load_events(str(q), header=False)
    r = tmp_path / "neg.tsv"
    r.write_text("u1\ti1\t-5\tclick\n")
    with pytest.raises(CorpusFormatError):
        load_events(str(r), header=False)


def test_load_events_custom_delimiter(tmp_path):
    p = tmp_path / "events.csv"
    p.write_text("u1,i1,100,click\nu1,i2,200,click\n")
    events = load_events(str(p), delimiter=",")
    assert len(events) == 2


# ----------------------------------------------------------------------
# sessionize
# ----------------------------------------------------------------------

def test_sessionize_splits_on_idle_gap():
    spec = SplitSpec(idle_threshold_s=1800)
    events = [_ev("u", "a", 0), _ev("u", "b", 1799), _ev("u", "c", 1799 + 1800)]
    users = sessionize(events, spec)
    assert len(users) == 1
    sessions = users[0].sessions
    assert [s.items for s in sessions] == [["a", "b"], ["c"]]


def test_sessionize_gap_exactly_at_threshold_starts_new_session():
    spec = SplitSpec(idle_threshold_s=100)
    users = sessionize([_ev("u", "a", 0), _ev("u", "b", 100)], spec)
    assert [s.items for s in users[0].sessions] == [["a"], ["b"]]


def test_sessionize_sorts_by_time_keeping_tie_order():
    spec = SplitSpec()
    events = [_ev("u", "late", 500), _ev("u", "first", 100),
              _ev("u", "tie_a", 300), _ev("u", "tie_b", 300)]
    users = sessionize(events, spec)
    assert users[0].sessions[0].items == ["first", "tie_a", "tie_b", "late"]


def test_sessionize_drops_types_before_gap_logic():
    # the dropped event in the middle would otherwise bridge the idle gap
    spec = SplitSpec(idle_threshold_s=1000, dropped_types=("impression",))
    events = [_ev("u", "a", 0), _ev("u", "x", 600, "impression"), _ev("u", "b", 1200)]
    users = sessionize(events, spec)
    assert [s.items for s in users[0].sessions] == [["a"], ["b"]]


def test_sessionize_dedup_same_type_within_session():
    spec = SplitSpec(dedup_same_type_in_session=True)
    events = [_ev("u", "a", 0), _ev("u", "a", 10), _ev("u", "a", 20, "reply"),
              _ev("u", "b", 30), _ev("u", "a", 40)]
    users = sessionize(events, spec)
    # second and final plain 'a' collapse into the first; the 'reply' stays
    assert users[0].sessions[0].items == ["a", "a", "b"]
    spec_off = SplitSpec()
    users_off = sessionize(events, spec_off)
    assert users_off[0].sessions[0].items == ["a", "a", "a", "b", "a"]


def test_sessionize_users_keep_first_appearance_order():
    events = [_ev("zz", "a", 0), _ev("aa", "b", 0), _ev("zz", "c", 10)]
    users = sessionize(events, SplitSpec())
    assert [u.user_id for u in users] == ["zz", "aa"]
    assert [u.user_index for u in users] == [0, 1]


# ----------------------------------------------------------------------
# filtering and splitting
# ----------------------------------------------------------------------

def _histories(spec_sessions):
    """Build raw histories from {user: [[item, ...], ...]} with wide gaps."""
    users = []
    for idx, (uid, sessions) in enumerate(spec_sessions.items()):
        ts = 0
        built = []
        for items in sessions:
            stamps = list(range(ts, ts + len(items)))
            built.append(Session(items=list(items), timestamps=stamps))
            ts += len(items) + 10_000
        users.append(UserHistory(idx, uid, built))
    return users


def test_filter_removes_rare_items_then_short_sessions_then_users():
    # 'rare' appears once; removing it shortens u2's only long-enough session
    # below the minimum, which then drops u2 entirely
    histories = _histories({
        "u1": [["a", "b", "c"], ["a", "b", "c"], ["a", "c", "b"]],
        "u2": [["a", "b", "rare"], ["a", "b"], ["b", "c", "a"]],
    })
    spec = SplitSpec(min_item_support=2, min_session_len=3, min_user_sessions=3)
    kept = filter_corpus(histories, spec)
    assert [u.user_id for u in kept] == ["u1"]
    assert kept[0].user_index == 0


def test_filter_reindexes_users_densely():
    histories = _histories({
        "u1": [["a"]], "u2": [["a", "b"], ["b", "a"]], "u3": [["b", "a"], ["a", "b"]],
    })
    spec = SplitSpec(min_item_support=1, min_session_len=2, min_user_sessions=2)
    kept = filter_corpus(histories, spec)
    assert [(u.user_id, u.user_index) for u in kept] == [("u2", 0), ("u3", 1)]


def test_split_last_session_basic():
    histories = _histories({
        "u1": [["a", "b"], ["b", "c"], ["a", "c"]],
        "u2": [["c", "a"], ["a", "b"]],
    })
    train, test = split_last_session(histories)
    assert train.item_vocab.ids == ["a", "b", "c"]
    assert [len(u.sessions) for u in train.users] == [2, 1]
    assert [len(u.sessions) for u in test.users] == [1, 1]
    # indices decode back to the original ids
    decoded = [train.item_vocab.ids[i] for i in test.users[0].sessions[0].items]
    assert decoded == ["a", "c"]


def test_split_drops_unseen_test_items_and_short_test_sessions():
    histories = _histories({
        "u1": [["a", "b"], ["a", "b"], ["a", "new", "new2"]],   # test shrinks to 1 event
        "u2": [["a", "b"], ["b", "a"], ["b", "new", "a"]],      # test keeps 2 events
    })
    train, test = split_last_session(histories)
    assert "new" not in train.item_vocab.ids
    assert [u.user_id for u in test.users] == ["u2"]
    assert [train.item_vocab.ids[i] for i in test.users[0].sessions[0].items] == ["b", "a"]


def test_split_requires_two_sessions_per_user():
    with pytest.raises(ValueError):
        split_last_session(_histories({"u1": [["a", "b"]]}))


def test_derive_validation_keeps_vocabulary_and_holds_out_last_sessions():
    corpus = corpus_from_item_lists(
        [[[0, 1, 2], [1, 2, 3], [2, 3, 0]], [[3, 0, 1], [0, 1, 2]]], 4)
    core, holdout = derive_validation(corpus)
    assert core.item_vocab is corpus.item_vocab
    assert holdout.item_vocab is corpus.item_vocab
    assert [len(u.sessions) for u in core.users] == [2, 1]
    assert [len(u.sessions) for u in holdout.users] == [1, 1]
    assert holdout.users[0].sessions[0].items == [2, 3, 0]


def test_derive_validation_drops_holdout_items_missing_from_core():
    # item 3 appears only in the users' last sessions, so the holdout loses it
    corpus = corpus_from_item_lists(
        [[[0, 1], [0, 3, 1]], [[1, 2], [2, 0]]], 4)
    core, holdout = derive_validation(corpus)
    held_items = {i for u in holdout.users for s in u.sessions for i in s.items}
    assert 3 not in held_items
    assert holdout.users[0].sessions[0].items == [0, 1]


# ----------------------------------------------------------------------
# stats, vocabulary, round trips
# ----------------------------------------------------------------------

def test_corpus_stats_counts_and_moments():
    corpus = corpus_from_item_lists([[[0, 1, 2], [1, 2]], [[2, 0]]], 3)
    stats = corpus_stats(corpus)
    assert stats["users"] == 2
    assert stats["items"] == 3
    assert stats["sessions"] == 3
    assert stats["events"] == 7
    assert stats["events_per_session"]["mean"] == pytest.approx(7 / 3)
    assert stats["sessions_per_user"]["median"] == pytest.approx(1.5)
    # item 2 appears three times, items 0/1 twice each
    assert stats["events_per_item"]["mean"] == pytest.approx(7 / 3)


def test_item_vocab_round_trip_and_hash():
    vocab = ItemVocab(["apple", "pear", "plum"])
    assert vocab.size == 3
    assert vocab.index["pear"] == 1
    assert vocab.content_hash() == ItemVocab(["apple", "pear", "plum"]).content_hash()
    assert vocab.content_hash() != ItemVocab(["apple", "pear"]).content_hash()


def test_flatten_histories_round_trip():
    histories = _histories({"u1": [["a", "b"], ["c", "a"]], "u2": [["b", "c"]]})
    events = flatten_histories(histories)
    back = sessionize(events, SplitSpec())
    assert [[s.items for s in u.sessions] for u in back] == \
           [[s.items for s in u.sessions] for u in histories]


def test_corpus_file_round_trip(tmp_path):
    corpus = corpus_from_item_lists([[[0, 1, 2], [2, 1]], [[1, 0]]], 3)
    path = tmp_path / "split.tsv"
    write_corpus_file(str(path), corpus)
    back = read_corpus_file(str(path), corpus.item_vocab)
    assert len(back.users) == 2
    for orig, loaded in zip(corpus.users, back.users):
        assert [s.items for s in orig.sessions] == [s.items for s in loaded.sessions]
        assert [s.timestamps for s in orig.sessions] == [s.timestamps for s in loaded.sessions]


def test_corpus_file_rejects_wrong_magic(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("NOT-A-CORPUS\n0\t0\t0\t0\n")
    with pytest.raises(CorpusFormatError):
        read_corpus_file(str(path), ItemVocab(["a"]))


def test_corpus_dir_round_trip(tmp_path):
    events = archetype_events(n_users=12, n_items=16, n_pools=4, seed=3)
    train, valid, test = preprocess_events(events, SplitSpec())
    out = tmp_path / "corpus"
    write_corpus_dir(str(out), train, valid, test, SplitSpec())
    t2, v2, s2, meta = load_corpus_dir(str(out))
    assert meta["vocab_hash"] == train.item_vocab.content_hash()
    assert t2.item_vocab.ids == train.item_vocab.ids
    for a, b in ((train, t2), (valid, v2), (test, s2)):
        assert [(u.user_index, [s.items for s in u.sessions]) for u in a.users] == \
               [(u.user_index, [s.items for s in u.sessions]) for u in b.users]
    # user ids survive the round trip
    assert [u.user_id for u in t2.users] == [u.user_id for u in train.users]


def test_preprocess_events_pipeline_invariants():
    events = archetype_events(n_users=25, n_items=24, n_pools=6, seed=5)
    train, valid, test = preprocess_events(events, SplitSpec())
    # every user present in test exists in train with at least one session
    train_users = {u.user_index for u in train.users}
    for u in test.users:
        assert u.user_index in train_users
        for s in u.sessions:
            assert len(s.items) >= 2
            for item in s.items:
                assert 0 <= item < train.n_items
    # validation shares the train vocabulary object
    assert valid.item_vocab.content_hash() == train.item_vocab.content_hash()
    # the generator avoids repeats, so deduplication cannot have removed events
    per_user = {u.user_id: sum(len(s.items) for s in u.sessions) for u in train.users}
    for u in test.users:
        per_user[u.user_id] = per_user.get(u.user_id, 0) + sum(len(s.items) for s in u.sessions)
    by_raw = {}
    for e in events:
        by_raw[e.user_id] = by_raw.get(e.user_id, 0) + 1
    for uid, total in per_user.items():
        assert total == by_raw[uid]


def test_preprocess_raises_when_nothing_survives():
    events = [_ev("u", "a", 0), _ev("u", "b", 10)]
    with pytest.raises(CorpusFormatError):
        preprocess_events(events, SplitSpec())
