"""Input validation helpers and the error types shared across the package."""

from __future__ import annotations

import numpy as np


class CorpusFormatError(Exception):
    """Raised when an events file or corpus dump cannot be parsed."""


class VocabMismatchError(Exception):
    """Raised when a checkpoint and a corpus disagree on the item vocabulary."""


class DivergenceError(Exception):
    """Raised when training produces a non-finite loss."""


def check_positive_int(value, name):
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value <= 0:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_non_negative(value, name):
    if not np.isscalar(value) or isinstance(value, bool) or float(value) < 0:
        raise ValueError(f"{name} must be a non-negative number, got {value!r}")
    return float(value)


def check_probability(value, name):
    """Validate a dropout-style probability, which must lie in [0, 1)."""
    value = check_non_negative(value, name)
    if value >= 1.0:
        raise ValueError(f"{name} must be below 1.0, got {value!r}")
    return value


def check_choice(value, name, choices):
    if value not in choices:
        raise ValueError(f"{name} must be one of {sorted(choices)}, got {value!r}")
    return value


def check_matrix(arr, name, shape=None):
    """Require a 2-D float64 array, optionally of an exact shape."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"{name} must have shape {tuple(shape)}, got {arr.shape}")
    return np.ascontiguousarray(arr, dtype=np.float64)


def check_corpus(corpus):
    """Light structural checks before fitting a model on a corpus."""
    if corpus.n_items <= 0:
        raise ValueError("corpus has an empty item vocabulary")
    if not corpus.users:
        raise ValueError("corpus has no users")
    for user in corpus.users:
        for session in user.sessions:
            for item in session.items:
                if not 0 <= item < corpus.n_items:
                    raise ValueError(
                        f"item index {item} out of range for vocabulary of "
                        f"size {corpus.n_items} (user {user.user_id})"
                    )
    return corpus
