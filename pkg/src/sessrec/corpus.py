"""Interaction-log ingestion: sessionization, filtering, and splitting.

The raw input is a delimited event log (user, item, timestamp, type).  The
pipeline groups events per user, cuts sessions on idle gaps, applies support
and length filters, and holds out each user's last session as the test split.
Item ids are mapped to dense indices by a vocabulary built from the training
side only, and the result is written as a versioned corpus dump.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .validation import CorpusFormatError

logger = logging.getLogger(__name__)

CORPUS_MAGIC = "SESSREC-CORPUS-v1"


@dataclass(frozen=True)
class RawEvent:
    user_id: str
    item_id: str
    timestamp: int
    interaction_type: str


@dataclass
class SplitSpec:
    """Thresholds of the preprocessing pipeline."""

    idle_threshold_s: int = 1800
    min_item_support: int = 1
    min_session_len: int = 3
    min_user_sessions: int = 5
    dropped_types: tuple = ()
    dedup_same_type_in_session: bool = False

    def validate(self):
        for name in ("idle_threshold_s", "min_item_support", "min_session_len", "min_user_sessions"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        return self


@dataclass
class Session:
    """One session: item ids (raw) or item indices (after the split)."""

    items: list
    timestamps: list


@dataclass
class UserHistory:
    user_index: int
    user_id: str
    sessions: list


@dataclass
class ItemVocab:
    """Bidirectional map between original item ids and dense indices."""

    ids: list
    index: dict = field(init=False)

    def __post_init__(self):
        self.index = {item_id: i for i, item_id in enumerate(self.ids)}

    @property
    def size(self):
        return len(self.ids)

    def content_hash(self):
        digest = hashlib.sha256("\n".join(str(i) for i in self.ids).encode("utf-8"))
        return digest.hexdigest()[:16]


@dataclass
class Corpus:
    users: list
    item_vocab: ItemVocab

    @property
    def n_items(self):
        return self.item_vocab.size

    def n_sessions(self):
        return sum(len(u.sessions) for u in self.users)

    def n_events(self):
        return sum(len(s.items) for u in self.users for s in u.sessions)

    def iter_sessions(self):
        for user in self.users:
            for session in user.sessions:
                yield user, session

    def users_by_index(self):
        return {u.user_index: u for u in self.users}


def load_events(path, delimiter="\t", header="auto"):
    """Parse a delimited event log into RawEvents, in file order.

    Rows with a wrong column count or empty fields are skipped and counted;
    a non-integer or negative timestamp is a hard error naming the line.
    With header="auto" the first line is treated as a header when its
    timestamp column is not an integer.
    """
    events = []
    malformed = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split(delimiter)
            if lineno == 1 and header == "auto":
                if len(parts) == 4 and not _is_int(parts[2]):
                    continue
            elif lineno == 1 and header is True:
                continue
            if len(parts) != 4 or any(p == "" for p in parts):
                malformed += 1
                continue
            user_id, item_id, ts_text, kind = parts
            if not _is_int(ts_text):
                raise CorpusFormatError(f"{path}:{lineno}: unparseable timestamp {ts_text!r}")
            timestamp = int(ts_text)
            if timestamp < 0:
                raise CorpusFormatError(f"{path}:{lineno}: negative timestamp {timestamp}")
            events.append(RawEvent(user_id, item_id, timestamp, kind))
    if malformed:
        logger.warning("skipped %d malformed lines in %s", malformed, path)
    return events


def _is_int(text):
    try:
        int(text)
    except ValueError:
        return False
    return True


def sessionize(events, spec):
    """Group events per user and cut sessions on idle gaps.

    Events of a dropped type are removed before gap computation.  Within each
    user, events are sorted by timestamp with ties keeping input order.  A gap
    of at least ``idle_threshold_s`` starts a new session.  With dedup enabled,
    repeated (item, type) pairs inside one session collapse to the first
    occurrence, applied after the session boundaries are fixed.
    """
    spec.validate()
    dropped = set(spec.dropped_types)
    by_user = {}
    order = []
    for event in events:
        if event.interaction_type in dropped:
            continue
        if event.user_id not in by_user:
            by_user[event.user_id] = []
            order.append(event.user_id)
        by_user[event.user_id].append(event)

    histories = []
    for user_index, user_id in enumerate(order):
        rows = sorted(by_user[user_id], key=lambda e: e.timestamp)
        sessions = []
        current = []
        for event in rows:
            if current and event.timestamp - current[-1].timestamp >= spec.idle_threshold_s:
                sessions.append(current)
                current = []
            current.append(event)
        if current:
            sessions.append(current)

        built = []
        for chunk in sessions:
            if spec.dedup_same_type_in_session:
                seen = set()
                kept = []
                for event in chunk:
                    key = (event.item_id, event.interaction_type)
                    if key in seen:
                        continue
                    seen.add(key)
                    kept.append(event)
                chunk = kept
            built.append(Session(items=[e.item_id for e in chunk], timestamps=[e.timestamp for e in chunk]))
        histories.append(UserHistory(user_index=user_index, user_id=user_id, sessions=built))
    return histories


def flatten_histories(histories, interaction_type="click"):
    """Turn histories back into a flat event list (types are not retained)."""
    events = []
    for user in histories:
        for session in user.sessions:
            for item, ts in zip(session.items, session.timestamps):
                events.append(RawEvent(user.user_id, item, ts, interaction_type))
    return events


def filter_corpus(histories, spec):
    """Apply the support, session-length, and user-session filters, in order.

    Single pass: (1) items with a global event count below min_item_support are
    removed from all sessions; (2) sessions left with fewer than min_session_len
    events are removed; (3) users left with fewer than min_user_sessions
    sessions are removed.  Surviving users are re-indexed densely.
    """
    spec.validate()
    support = {}
    for user in histories:
        for session in user.sessions:
            for item in session.items:
                support[item] = support.get(item, 0) + 1
    keep_item = {item for item, count in support.items() if count >= spec.min_item_support}

    survivors = []
    for user in histories:
        sessions = []
        for session in user.sessions:
            pairs = [(i, t) for i, t in zip(session.items, session.timestamps) if i in keep_item]
            if len(pairs) >= spec.min_session_len:
                sessions.append(Session(items=[p[0] for p in pairs], timestamps=[p[1] for p in pairs]))
        if len(sessions) >= spec.min_user_sessions:
            survivors.append(UserHistory(user_index=len(survivors), user_id=user.user_id, sessions=sessions))
    return survivors


def split_last_session(histories):
    """Hold out each user's last session as test; earlier sessions form train.

    The item vocabulary is built from the train side (dense indices assigned in
    sorted original-id order).  Test events with items absent from the train
    side are removed, test sessions dropping below 2 events are discarded, and
    users without a surviving test session appear only in train.
    """
    for user in histories:
        if len(user.sessions) < 2:
            raise ValueError(f"user {user.user_id!r} has {len(user.sessions)} session(s); need >= 2 to split")

    train_ids = {item for u in histories for s in u.sessions[:-1] for item in s.items}
    vocab = ItemVocab(sorted(train_ids))
    train_users = []
    test_users = []
    for user in histories:
        train_sessions = [
            Session(items=[vocab.index[i] for i in s.items], timestamps=list(s.timestamps))
            for s in user.sessions[:-1]
        ]
        train_users.append(UserHistory(user.user_index, user.user_id, train_sessions))
        last = user.sessions[-1]
        pairs = [(vocab.index[i], t) for i, t in zip(last.items, last.timestamps) if i in vocab.index]
        if len(pairs) >= 2:
            held = Session(items=[p[0] for p in pairs], timestamps=[p[1] for p in pairs])
            test_users.append(UserHistory(user.user_index, user.user_id, [held]))
    return Corpus(train_users, vocab), Corpus(test_users, vocab)


def derive_validation(corpus):
    """Re-apply the last-session holdout on an already indexed train corpus.

    Returns (core, holdout) sharing the original vocabulary, so models tuned on
    the holdout transfer to the full corpus without re-indexing.  Holdout
    events whose item does not occur in the core events are removed, and
    holdout sessions dropping below 2 events are discarded.
    """
    for user in corpus.users:
        if len(user.sessions) < 2:
            raise ValueError(f"user {user.user_id!r} has {len(user.sessions)} session(s); need >= 2 to split")
    core_items = {item for u in corpus.users for s in u.sessions[:-1] for item in s.items}
    core_users = []
    holdout_users = []
    for user in corpus.users:
        core_users.append(UserHistory(user.user_index, user.user_id, list(user.sessions[:-1])))
        last = user.sessions[-1]
        pairs = [(i, t) for i, t in zip(last.items, last.timestamps) if i in core_items]
        if len(pairs) >= 2:
            held = Session(items=[p[0] for p in pairs], timestamps=[p[1] for p in pairs])
            holdout_users.append(UserHistory(user.user_index, user.user_id, [held]))
    return Corpus(core_users, corpus.item_vocab), Corpus(holdout_users, corpus.item_vocab)


def corpus_to_histories(corpus):
    """Map a corpus back to histories holding original item ids."""
    ids = corpus.item_vocab.ids
    out = []
    for user in corpus.users:
        sessions = [Session(items=[ids[i] for i in s.items], timestamps=list(s.timestamps)) for s in user.sessions]
        out.append(UserHistory(user.user_index, user.user_id, sessions))
    return out


def _moments(values):
    if len(values) == 0:
        return {"mean": 0.0, "median": 0.0, "std": 0.0}
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "median": float(np.median(arr)), "std": float(arr.std())}


def corpus_stats(corpus):
    """Headline counts plus distribution moments, as a plain dict."""
    session_lengths = [len(s.items) for _, s in corpus.iter_sessions()]
    sessions_per_user = [len(u.sessions) for u in corpus.users]
    item_counts = np.zeros(corpus.n_items, dtype=np.int64)
    for _, session in corpus.iter_sessions():
        for item in session.items:
            item_counts[item] += 1
    return {
        "users": len(corpus.users),
        "items": corpus.n_items,
        "sessions": len(session_lengths),
        "events": int(sum(session_lengths)),
        "events_per_item": _moments(item_counts if corpus.n_items else []),
        "events_per_session": _moments(session_lengths),
        "sessions_per_user": _moments(sessions_per_user),
    }


def preprocess_events(events, spec):
    """Full pipeline: sessionize, filter, split, and derive validation.

    Returns (train, valid, test); valid is the last-session holdout of train,
    kept in the train index space.
    """
    histories = filter_corpus(sessionize(events, spec), spec)
    if not histories:
        raise CorpusFormatError("no users survive preprocessing; thresholds too strict for this log")
    train, test = split_last_session(histories)
    _, valid = derive_validation(train)
    return train, valid, test


def write_corpus_file(path, corpus):
    """Write one split as magic line + (user_index, session_ordinal, item_index, timestamp) rows."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CORPUS_MAGIC + "\n")
        for user in corpus.users:
            for ordinal, session in enumerate(user.sessions):
                for item, ts in zip(session.items, session.timestamps):
                    fh.write(f"{user.user_index}\t{ordinal}\t{item}\t{ts}\n")


def read_corpus_file(path, vocab, user_ids=None):
    """Read a split written by write_corpus_file, reusing a shared vocabulary."""
    users = {}
    with open(path, "r", encoding="utf-8") as fh:
        magic = fh.readline().rstrip("\n")
        if magic != CORPUS_MAGIC:
            raise CorpusFormatError(f"{path}: bad magic line {magic!r}; expected {CORPUS_MAGIC}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise CorpusFormatError(f"{path}:{lineno}: expected 4 columns, got {len(parts)}")
            uidx, ordinal, item, ts = int(parts[0]), int(parts[1]), int(parts[2]), int(parts[3])
            if not 0 <= item < vocab.size:
                raise CorpusFormatError(f"{path}:{lineno}: item index {item} outside vocabulary")
            sessions = users.setdefault(uidx, {})
            session = sessions.setdefault(ordinal, Session([], []))
            session.items.append(item)
            session.timestamps.append(ts)
    built = []
    for uidx in sorted(users):
        sessions = [users[uidx][k] for k in sorted(users[uidx])]
        user_id = user_ids.get(uidx, str(uidx)) if user_ids else str(uidx)
        built.append(UserHistory(uidx, user_id, sessions))
    return Corpus(built, vocab)


def write_corpus_dir(path, train, valid, test, spec=None):
    """Persist the three splits plus vocabulary, user map, and metadata."""
    os.makedirs(path, exist_ok=True)
    write_corpus_file(os.path.join(path, "train.tsv"), train)
    write_corpus_file(os.path.join(path, "valid.tsv"), valid)
    write_corpus_file(os.path.join(path, "test.tsv"), test)
    with open(os.path.join(path, "vocab.tsv"), "w", encoding="utf-8") as fh:
        for i, item_id in enumerate(train.item_vocab.ids):
            fh.write(f"{i}\t{item_id}\n")
    with open(os.path.join(path, "users.tsv"), "w", encoding="utf-8") as fh:
        for user in train.users:
            fh.write(f"{user.user_index}\t{user.user_id}\n")
    meta = {
        "format": CORPUS_MAGIC,
        "vocab_hash": train.item_vocab.content_hash(),
        "stats": {"train": corpus_stats(train), "valid": corpus_stats(valid), "test": corpus_stats(test)},
    }
    if spec is not None:
        meta["split"] = {
            "idle_threshold_s": spec.idle_threshold_s,
            "min_item_support": spec.min_item_support,
            "min_session_len": spec.min_session_len,
            "min_user_sessions": spec.min_user_sessions,
            "dropped_types": sorted(spec.dropped_types),
            "dedup_same_type_in_session": spec.dedup_same_type_in_session,
        }
    with open(os.path.join(path, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_corpus_dir(path):
    """Load the splits written by write_corpus_dir.

    Returns (train, valid, test, meta); the three corpora share one vocabulary.
    """
    vocab_path = os.path.join(path, "vocab.tsv")
    ids = []
    with open(vocab_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise CorpusFormatError(f"{vocab_path}:{lineno}: expected 2 columns")
            if int(parts[0]) != lineno - 1:
                raise CorpusFormatError(f"{vocab_path}:{lineno}: indices must be dense and ordered")
            ids.append(parts[1])
    vocab = ItemVocab(ids)
    user_ids = {}
    users_path = os.path.join(path, "users.tsv")
    if os.path.exists(users_path):
        with open(users_path, "r", encoding="utf-8") as fh:
            for line in fh:
                idx, user_id = line.rstrip("\n").split("\t")
                user_ids[int(idx)] = user_id
    train = read_corpus_file(os.path.join(path, "train.tsv"), vocab, user_ids)
    valid = read_corpus_file(os.path.join(path, "valid.tsv"), vocab, user_ids)
    test = read_corpus_file(os.path.join(path, "test.tsv"), vocab, user_ids)
    with open(os.path.join(path, "meta.json"), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    return train, valid, test, meta
