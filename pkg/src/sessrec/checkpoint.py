"""Deterministic binary checkpoints for every model kind.

Layout: a magic line, then length-prefixed UTF-8 blocks for the model kind
and a JSON config (constructor parameters, catalog size, vocabulary hash,
per-epoch training losses, and the shape/dtype bookkeeping needed to restore
arrays exactly), then a count of named float64 matrices.  Writing the same
fitted model twice produces byte-identical files.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .baselines import ItemKnn, PersonalPop
from .gru import GruParams
from .hrnn import Hrnn
from .session_rnn import SessionRnn
from .tensor_math import read_matrix, write_matrix

CHECKPOINT_MAGIC = b"SESSREC-CKPT-v1\n"
GRU_FIELDS = ("w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h")

__all__ = ["CHECKPOINT_MAGIC", "save_model", "load_model", "infer_kind"]


def infer_kind(model):
    if isinstance(model, Hrnn):
        return f"hrnn-{model.variant}"
    if isinstance(model, SessionRnn):
        return "rnn"
    if isinstance(model, PersonalPop):
        return "ppop"
    if isinstance(model, ItemKnn):
        return "itemknn"
    raise TypeError(f"cannot checkpoint a {type(model).__name__}")


def _write_block(fh, payload):
    fh.write(struct.pack("<q", len(payload)))
    fh.write(payload)


def _read_block(fh):
    header = fh.read(8)
    if len(header) != 8:
        raise ValueError("truncated checkpoint block header")
    (length,) = struct.unpack("<q", header)
    if length < 0:
        raise ValueError(f"corrupt checkpoint block length {length}")
    payload = fh.read(length)
    if len(payload) != length:
        raise ValueError("truncated checkpoint block payload")
    return payload


def _model_matrices(model, kind):
    if kind in ("rnn", "rnn-concat") or kind.startswith("hrnn"):
        return dict(model.parameters()), []
    if kind == "ppop":
        triples = []
        for user_index in sorted(model.user_counts_):
            counts = model.user_counts_[user_index]
            for item in sorted(counts):
                triples.append((user_index, item, counts[item]))
        triples = np.asarray(triples, dtype=np.float64).reshape(-1, 3)
        return ({"user_item_counts": triples,
                 "global_counts": model.global_counts_.astype(np.float64)},
                ["user_item_counts", "global_counts"])
    if kind == "itemknn":
        triples = []
        for item, (idx, sims) in enumerate(model.neighbors_):
            for neighbor, sim in zip(idx, sims):
                triples.append((float(item), float(neighbor), sim))
        triples = np.asarray(triples, dtype=np.float64).reshape(-1, 3)
        return {"neighbor_triples": triples}, []
    raise ValueError(f"unknown checkpoint kind {kind!r}")


def save_model(model, path, kind=None):
    """Serialize a fitted model.  ``kind`` defaults to the model's own kind;
    pass "rnn-concat" to mark a session model trained on concatenated
    sessions (the kind selects the evaluation walker on load)."""
    kind = kind or infer_kind(model)
    matrices, integer_names = _model_matrices(model, kind)
    config = {
        "params": model.get_params(),
        "n_items": int(model.n_items_),
        "vocab_hash": getattr(model, "vocab_hash_", None),
        "train_loss_per_epoch": [float(v) for v in getattr(model, "train_loss_per_epoch_", [])],
        "shapes": {name: list(np.asarray(arr).shape) for name, arr in matrices.items()},
        "integer": integer_names,
    }
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        _write_block(fh, kind.encode("utf-8"))
        _write_block(fh, blob)
        fh.write(struct.pack("<q", len(matrices)))
        for name in sorted(matrices):
            _write_block(fh, name.encode("utf-8"))
            write_matrix(fh, matrices[name])


def _restore_array(raw, name, config):
    shape = tuple(config["shapes"][name])
    arr = raw.reshape(shape)
    if name in config["integer"]:
        arr = arr.astype(np.int64)
    return arr


def _gru_from(matrices, prefix):
    return GruParams(**{f: matrices[prefix + f] for f in GRU_FIELDS})


def load_model(path):
    """Rebuild a fitted model from ``save_model`` output.

    Returns (model, kind); the kind distinguishes "rnn" from "rnn-concat"
    so callers can pick the matching evaluation walker.
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        kind = _read_block(fh).decode("utf-8")
        config = json.loads(_read_block(fh).decode("utf-8"))
        header = fh.read(8)
        if len(header) != 8:
            raise ValueError("truncated checkpoint matrix count")
        (count,) = struct.unpack("<q", header)
        matrices = {}
        for _ in range(count):
            name = _read_block(fh).decode("utf-8")
            matrices[name] = _restore_array(read_matrix(fh), name, config)

    params = config["params"]
    n_items = config["n_items"]
    if kind in ("rnn", "rnn-concat"):
        model = SessionRnn(**params)
        model.n_items_ = n_items
        model.gru_ = _gru_from(matrices, "gru.")
        model.output_w_ = matrices["out.w"]
        model.output_b_ = matrices.get("out.b", np.zeros(n_items))
    elif kind in ("hrnn-init", "hrnn-all"):
        model = Hrnn(**params)
        model.n_items_ = n_items
        model.user_size_ = (params["user_hidden_size"]
                            if params.get("user_hidden_size") is not None
                            else params["hidden_size"])
        model.session_gru_ = _gru_from(matrices, "ses.")
        model.user_gru_ = _gru_from(matrices, "usr.")
        model.init_w_ = matrices["init.w"]
        model.init_b_ = matrices["init.b"]
        model.output_w_ = matrices["out.w"]
        model.output_b_ = matrices.get("out.b", np.zeros(n_items))
    elif kind == "ppop":
        model = PersonalPop(**params)
        model.n_items_ = n_items
        model.global_counts_ = matrices["global_counts"].ravel()
        model.user_counts_ = {}
        for user_index, item, count in matrices["user_item_counts"].reshape(-1, 3):
            counts = model.user_counts_.setdefault(int(user_index), {})
            counts[int(item)] = int(count)
    elif kind == "itemknn":
        model = ItemKnn(**params)
        model.n_items_ = n_items
        lists = [([], []) for _ in range(n_items)]
        for item, neighbor, sim in matrices["neighbor_triples"].reshape(-1, 3):
            lists[int(item)][0].append(int(neighbor))
            lists[int(item)][1].append(float(sim))
        model.neighbors_ = [(np.asarray(idx, dtype=np.intp), np.asarray(sims))
                            for idx, sims in lists]
    else:
        raise ValueError(f"unknown checkpoint kind {kind!r}")

    model.vocab_hash_ = config["vocab_hash"]
    if config["train_loss_per_epoch"]:
        model.train_loss_per_epoch_ = list(config["train_loss_per_epoch"])
    return model, kind
