"""Synthetic corpora with controllable personalization structure.

The archetype generator assigns each user to one of a few item pools and
makes within-session transitions follow a cycle over the pool.  A session's
first event is uniform over the whole catalog, so the second event is
predictable only from the user's identity (their pool), never from the
session itself — separating models that carry user state from models that
start every session cold.
"""

from __future__ import annotations

import numpy as np

from .corpus import Corpus, ItemVocab, RawEvent, Session, UserHistory
from .tensor_math import make_rng

__all__ = [
    "archetype_events", "successor_events", "corpus_from_item_lists",
    "random_corpus",
]

SESSION_GAP_S = 86_400
EVENT_GAP_S = 60


def _pool_members(pool, n_pools, n_items):
    return list(range(pool, n_items, n_pools))


def archetype_events(n_users=200, n_items=40, n_pools=8, min_sessions=5,
                     max_sessions=8, min_len=3, max_len=4, p_follow=0.85,
                     seed=0):
    """Events for pool-structured users (user u belongs to pool u mod n_pools).

    Per session: the first event is uniform over the catalog; the second is
    uniform over the user's pool; later events follow the pool's cycle order
    with probability ``p_follow``, otherwise resample uniformly in the pool.
    No item repeats within a session, so idle-gap sessionization and
    deduplication reproduce the generated sessions exactly.
    """
    if n_items % n_pools != 0:
        raise ValueError("n_items must be a multiple of n_pools")
    pool_size = n_items // n_pools
    if max_len > pool_size:
        raise ValueError("sessions longer than the pool cannot avoid repeats")
    rng = make_rng(seed)
    events = []
    for u in range(n_users):
        pool = _pool_members(u % n_pools, n_pools, n_items)
        ts = 1_000_000 + u  # staggered so global ordering interleaves users
        n_sessions = int(rng.integers(min_sessions, max_sessions + 1))
        for _ in range(n_sessions):
            length = int(rng.integers(min_len, max_len + 1))
            used = set()
            first = int(rng.integers(n_items))
            session_items = [first]
            used.add(first)
            while len(session_items) < length:
                unused_pool = [i for i in pool if i not in used]
                current = session_items[-1]
                if len(session_items) == 1 or current not in pool or rng.random() >= p_follow:
                    nxt = unused_pool[int(rng.integers(len(unused_pool)))]
                else:
                    step = pool[(pool.index(current) + 1) % len(pool)]
                    nxt = step if step not in used else unused_pool[int(rng.integers(len(unused_pool)))]
                session_items.append(nxt)
                used.add(nxt)
            for item in session_items:
                events.append(RawEvent(f"u{u}", f"i{item}", ts, "click"))
                ts += EVENT_GAP_S
            ts += SESSION_GAP_S
    return events


def successor_events(n_users=20, n_items=20, n_sessions=6, session_len=4, seed=0):
    """Events whose only structure is item k -> item k+1 (mod catalog):
    a purely session-local rule any next-item model can learn."""
    rng = make_rng(seed)
    events = []
    for u in range(n_users):
        ts = 1_000_000 + u
        for _ in range(n_sessions):
            item = int(rng.integers(n_items))
            for _ in range(session_len):
                events.append(RawEvent(f"u{u}", f"i{item}", ts, "click"))
                ts += EVENT_GAP_S
                item = (item + 1) % n_items
            ts += SESSION_GAP_S
    return events


def corpus_from_item_lists(users, n_items):
    """Corpus built directly from per-user lists of sessions of item indices
    (vocabulary ids equal indices; timestamps are synthesized)."""
    histories = []
    for user_index, sessions in enumerate(users):
        ts = 1_000_000
        built = []
        for items in sessions:
            stamps = [ts + EVENT_GAP_S * i for i in range(len(items))]
            built.append(Session(list(items), stamps))
            ts = stamps[-1] + SESSION_GAP_S if stamps else ts + SESSION_GAP_S
        histories.append(UserHistory(user_index, f"u{user_index}", built))
    return Corpus(histories, ItemVocab([str(i) for i in range(n_items)]))


def random_corpus(rng, n_users=5, n_items=12, max_sessions=4, max_len=6):
    """Unstructured random corpus for conservation-style tests: session
    lengths range from 1 (unusable) to ``max_len``."""
    users = []
    for _ in range(n_users):
        n_sessions = int(rng.integers(1, max_sessions + 1))
        sessions = []
        for _ in range(n_sessions):
            length = int(rng.integers(1, max_len + 1))
            sessions.append([int(rng.integers(n_items)) for _ in range(length)])
        users.append(sessions)
    return corpus_from_item_lists(users, n_items)


if __name__ == "__main__":  # tiny demo corpus for the command-line walkthrough
    import sys

    events = archetype_events()
    out = sys.argv[1] if len(sys.argv) > 1 else "events.tsv"
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("user_id\titem_id\ttimestamp\tinteraction_type\n")
        for e in events:
            fh.write(f"{e.user_id}\t{e.item_id}\t{e.timestamp}\t{e.interaction_type}\n")
    print(f"wrote {len(events)} events to {out}")
