"""Personalized session-based recommendation with hierarchical recurrent models.

A session-level GRU scores the next item within a session; an optional
user-level GRU carries each user's state across sessions, initializing (and
optionally feeding) the session model.  Ships with preprocessing for raw
event logs, popularity and item-similarity baselines, sequential next-item
evaluation, and a command-line interface.
"""

from .baselines import ItemKnn, PersonalPop, concat_sessions, similarity_matrix
from .corpus import (
    Corpus,
    ItemVocab,
    RawEvent,
    Session,
    SplitSpec,
    UserHistory,
    corpus_stats,
    derive_validation,
    load_corpus_dir,
    load_events,
    preprocess_events,
    split_last_session,
    write_corpus_dir,
)
from .checkpoint import load_model, save_model
from .evaluate import (
    EvalConfig,
    breakdown_by_history_length,
    breakdown_by_position,
    evaluate_model,
    headline_metrics,
    rank_of_target,
)
from .hrnn import Hrnn, stream_loss_and_gradients, user_parallel_batches
from .session_rnn import SessionRnn, session_parallel_batches
from .validation import (
    CorpusFormatError,
    DivergenceError,
    VocabMismatchError,
)

__version__ = "0.1.0"

__all__ = [
    "Corpus", "ItemVocab", "RawEvent", "Session", "SplitSpec", "UserHistory",
    "corpus_stats", "derive_validation", "load_corpus_dir", "load_events",
    "preprocess_events", "split_last_session", "write_corpus_dir",
    "SessionRnn", "Hrnn", "PersonalPop", "ItemKnn",
    "concat_sessions", "similarity_matrix",
    "session_parallel_batches", "user_parallel_batches", "stream_loss_and_gradients",
    "EvalConfig", "evaluate_model", "headline_metrics", "rank_of_target",
    "breakdown_by_history_length", "breakdown_by_position",
    "save_model", "load_model",
    "CorpusFormatError", "DivergenceError", "VocabMismatchError",
    "__version__",
]
