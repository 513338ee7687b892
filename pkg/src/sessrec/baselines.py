"""Non-hierarchical comparison systems.

PersonalPop ranks items by the user's own interaction counts, Item-KNN scores
neighbors of the last clicked item by session co-occurrence cosine, and
``concat_sessions`` turns a corpus into the one-long-session-per-user form used
to train a plain session RNN on full user histories.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .corpus import Corpus, Session, UserHistory
from .validation import check_corpus, check_positive_int


def concat_sessions(corpus):
    """Merge each user's sessions into a single chronological session."""
    users = []
    for user in corpus.users:
        items = [i for s in user.sessions for i in s.items]
        stamps = [t for s in user.sessions for t in s.timestamps]
        users.append(UserHistory(user.user_index, user.user_id, [Session(items, stamps)]))
    return Corpus(users, corpus.item_vocab)


class PersonalPop(BaseEstimator):
    """Rank items by the user's own interaction counts.

    Ties are broken by global count, then by item index; users absent from
    training fall back to the global ranking.  Score vectors encode ranks as
    descending integers (the best item scores n_items), so downstream ranking
    with pessimistic ties reproduces the stated tie-break exactly.
    """

    def fit(self, corpus):
        check_corpus(corpus)
        self.n_items_ = corpus.n_items
        self.vocab_hash_ = corpus.item_vocab.content_hash()
        self.global_counts_ = np.zeros(corpus.n_items, dtype=np.int64)
        self.user_counts_ = {}
        for user, session in corpus.iter_sessions():
            counts = self.user_counts_.setdefault(user.user_index, {})
            for item in session.items:
                counts[item] = counts.get(item, 0) + 1
                self.global_counts_[item] += 1
        return self

    def score(self, user_index):
        """Score vector for one user; higher score means ranked earlier."""
        check_is_fitted(self)
        personal = np.zeros(self.n_items_, dtype=np.int64)
        for item, count in self.user_counts_.get(user_index, {}).items():
            personal[item] = count
        order = np.lexsort((np.arange(self.n_items_), -self.global_counts_, -personal))
        scores = np.empty(self.n_items_)
        scores[order] = np.arange(self.n_items_, 0, -1)
        return scores


def _session_incidence(corpus):
    """Binary session-by-item incidence matrix (CSR)."""
    rows, cols = [], []
    n_sessions = 0
    for sid, (_, session) in enumerate(corpus.iter_sessions()):
        n_sessions = sid + 1
        for item in set(session.items):
            rows.append(sid)
            cols.append(item)
    data = np.ones(len(rows))
    return sp.csr_matrix((data, (rows, cols)), shape=(n_sessions, corpus.n_items))


def similarity_matrix(corpus):
    """Dense item-to-item cosine similarity over session co-occurrence.

    sim(a, b) = cooc(a, b) / sqrt(supp(a) * supp(b)), where cooc counts the
    sessions containing both items and supp the sessions containing the item;
    the diagonal is zeroed (an item is not its own neighbor).  Intended for
    small catalogs; fitting uses the same computation in sparse form.
    """
    return np.asarray(_similarity(corpus).todense())


def _similarity(corpus):
    incidence = _session_incidence(corpus)
    cooc = (incidence.T @ incidence).tocoo()
    support = np.asarray(incidence.sum(axis=0)).ravel()
    keep = cooc.row != cooc.col
    rows, cols, counts = cooc.row[keep], cooc.col[keep], cooc.data[keep]
    sims = counts / np.sqrt(support[rows] * support[cols])
    return sp.csr_matrix((sims, (rows, cols)), shape=(corpus.n_items, corpus.n_items))


class ItemKnn(BaseEstimator):
    """Item-to-item cosine similarity over session co-occurrence.

    Parameters
    ----------
    k : int
        Neighborhood size; each item keeps its k most similar items.
    """

    def __init__(self, k=300):
        self.k = k

    def fit(self, corpus):
        check_corpus(corpus)
        check_positive_int(self.k, "k")
        self.n_items_ = corpus.n_items
        self.vocab_hash_ = corpus.item_vocab.content_hash()
        sims = _similarity(corpus)
        self.neighbors_ = []
        for item in range(corpus.n_items):
            row = sims.getrow(item)
            idx, values = row.indices, row.data
            # sort by similarity descending, ties by item index ascending
            order = np.lexsort((idx, -values))[: self.k]
            self.neighbors_.append((idx[order].astype(np.intp), values[order]))
        return self

    def score(self, current_item):
        """Scores are the neighbor similarities of the current item, else 0."""
        check_is_fitted(self)
        scores = np.zeros(self.n_items_)
        if 0 <= current_item < self.n_items_:
            idx, sims = self.neighbors_[current_item]
            scores[idx] = sims
        return scores


def save_knn_triples(path, model):
    """Persist neighbor lists as (item, neighbor, similarity) tab-separated triples."""
    check_is_fitted(model)
    with open(path, "w", encoding="utf-8") as fh:
        for item, (idx, sims) in enumerate(model.neighbors_):
            for neighbor, sim in zip(idx, sims):
                fh.write(f"{item}\t{neighbor}\t{float(sim)!r}\n")


def load_knn_triples(path, n_items, k=300):
    """Rebuild an ItemKnn from the triples written by save_knn_triples."""
    lists = [([], []) for _ in range(n_items)]
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            item, neighbor, sim = line.rstrip("\n").split("\t")
            lists[int(item)][0].append(int(neighbor))
            lists[int(item)][1].append(float(sim))
    model = ItemKnn(k=k)
    model.n_items_ = n_items
    model.neighbors_ = [
        (np.asarray(idx, dtype=np.intp), np.asarray(sims)) for idx, sims in lists
    ]
    return model
