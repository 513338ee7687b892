"""Sequential next-item evaluation with ranking metrics and breakdowns.

Every session is walked event by event: after consuming a prefix, the model
scores the catalog and the next event's rank is recorded, so a session of N
events yields N - 1 ranked targets.  Models that carry a per-user state (the
hierarchical model and the concatenated-sessions baseline) first replay the
user's training history.  Ranks are pessimistic under ties: the target is
placed below every item scoring greater than or equal to it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from statistics import median

import numpy as np

__all__ = [
    "EvalConfig", "TargetOutcome", "EvalResult", "rank_of_target",
    "RnnWalker", "ConcatWalker", "HrnnWalker", "PpopWalker", "KnnWalker",
    "evaluate_model", "headline_metrics", "breakdown_by_history_length",
    "breakdown_by_position", "aggregate_headlines", "aggregate_breakdowns",
    "report_rows", "write_report_tsv", "format_report",
]


@dataclass
class EvalConfig:
    """Evaluation settings.

    cutoff : list length for Recall/Precision/MRR.
    skip_first_prediction : None uses each walker's default; False asks
        walkers that can score a session's first event from history alone
        (the concatenated baseline) to include it as a position-1 target.
    candidate_items : optional array of item indices restricting ranking to a
        candidate set; the current target always joins the candidates.
    position_key : "target" groups position breakdowns by the target's
        position in the session, "prefix" by the number of consumed events.
    """

    cutoff: int = 5
    skip_first_prediction: bool | None = None
    candidate_items: np.ndarray | None = None
    position_key: str = "target"


@dataclass
class TargetOutcome:
    """One ranked target: where it sat in the session and where it ranked."""

    user_index: int
    session_ordinal: int
    session_length: int
    history_sessions: int
    position: int
    rank: int


@dataclass
class EvalResult:
    outcomes: list = field(default_factory=list)
    cutoff: int = 5
    n_items: int = 0
    skipped_users: int = 0


def rank_of_target(scores, target, candidate_mask=None):
    """1-based rank of ``target`` in ``scores``, pessimistic under ties.

    rank = 1 + #(scores > target's) + #(other scores == target's); with a
    candidate mask only masked items (plus the target itself) compete.
    """
    t = scores[target]
    if candidate_mask is None:
        greater = int(np.count_nonzero(scores > t))
        equal = int(np.count_nonzero(scores == t)) - 1
    else:
        pool = scores[candidate_mask]
        greater = int(np.count_nonzero(pool > t))
        equal = int(np.count_nonzero(pool == t)) - (1 if candidate_mask[target] else 0)
    return 1 + greater + equal


class Walker:
    """Uniform stepping protocol over a model for sequential evaluation."""

    needs_history = False
    default_skip_first = True

    def begin_user(self, user_index, history_sessions):
        pass

    def begin_session(self):
        pass

    @property
    def first_scores(self):
        """Scores available before the session's first event, if the model
        can produce them (None otherwise)."""
        return None

    def step(self, item):
        """Consume one event, return scores for predicting the next."""
        raise NotImplementedError

    def consume(self, item):
        """Consume one event without needing the scores."""
        self.step(item)


class RnnWalker(Walker):
    """Session-only model: state resets at every session start."""

    def __init__(self, model):
        self.model = model
        self.state = None

    def begin_session(self):
        self.state = self.model.initial_state()

    def step(self, item):
        scores, self.state = self.model.score_step(item, self.state)
        return scores

    def consume(self, item):
        self.state = self.model.advance_state(item, self.state)


class ConcatWalker(Walker):
    """Concatenated-sessions baseline: one unbroken state per user.

    Training history is replayed before the first test session and the state
    persists across session boundaries.  Having replayed history, the walker
    already holds scores for a session's first event; they are used only when
    the configuration asks for position-1 targets.
    """

    needs_history = True

    def __init__(self, model):
        self.model = model
        self.state = None
        self._last_scores = None

    def begin_user(self, user_index, history_sessions):
        self.state = self.model.initial_state()
        self._last_scores = None
        for session in history_sessions or []:
            for item in session.items[:-1]:
                self.state = self.model.advance_state(item, self.state)
            self._last_scores, self.state = self.model.score_step(session.items[-1], self.state)

    @property
    def first_scores(self):
        return self._last_scores

    def step(self, item):
        self._last_scores, self.state = self.model.score_step(item, self.state)
        return self._last_scores

    def consume(self, item):
        self.state = self.model.advance_state(item, self.state)
        self._last_scores = None


class HrnnWalker(Walker):
    """Hierarchical model: replay history to rebuild the user state, then
    initialize each test session from it, updating it at session boundaries."""

    needs_history = True

    def __init__(self, model):
        self.model = model
        self.c = None
        self.s = None

    def begin_user(self, user_index, history_sessions):
        self.c = self.model.bootstrap_user(history_sessions or [])
        self.s = None

    def begin_session(self):
        if self.s is not None:
            self.c = self.model.update_user_state(self.s, self.c)
        self.s = self.model.init_session_state(self.c)

    def step(self, item):
        scores, self.s = self.model.hrnn_step(item, self.s, self.c)
        return scores

    def consume(self, item):
        self.s = self.model._step_state(item, self.s, self.c)


class PpopWalker(Walker):
    """Personal popularity: one fixed score vector per user."""

    def __init__(self, model):
        self.model = model
        self.scores = None

    def begin_user(self, user_index, history_sessions):
        self.scores = self.model.score(user_index)

    def step(self, item):
        return self.scores

    def consume(self, item):
        pass


class KnnWalker(Walker):
    """Item-to-item similarity: scores depend on the current event only."""

    def __init__(self, model):
        self.model = model

    def step(self, item):
        return self.model.score(item)

    def consume(self, item):
        pass


def evaluate_model(walker, test_corpus, history_corpus=None, config=None):
    """Walk every test session and collect ranked outcomes.

    ``history_corpus`` supplies the per-user training sessions replayed by
    walkers that need them; users missing from it are skipped (and counted).
    """
    cfg = config or EvalConfig()
    histories = {}
    if history_corpus is not None:
        histories = {u.user_index: u.sessions for u in history_corpus.users}
    base_mask = None
    if cfg.candidate_items is not None:
        base_mask = np.zeros(test_corpus.n_items, dtype=bool)
        base_mask[np.asarray(cfg.candidate_items, dtype=np.intp)] = True
    skip_first = cfg.skip_first_prediction
    if skip_first is None:
        skip_first = walker.default_skip_first

    result = EvalResult(cutoff=cfg.cutoff, n_items=test_corpus.n_items)
    for user in test_corpus.users:
        history = histories.get(user.user_index)
        if walker.needs_history and history is None and history_corpus is not None:
            result.skipped_users += 1
            continue
        n_history = len(history) if history is not None else 0
        walker.begin_user(user.user_index, history)
        for ordinal, session in enumerate(user.sessions):
            items = session.items
            if len(items) < 2:
                continue
            walker.begin_session()
            if not skip_first and walker.first_scores is not None:
                rank = _masked_rank(walker.first_scores, items[0], base_mask)
                result.outcomes.append(TargetOutcome(
                    user.user_index, ordinal, len(items), n_history, 1, rank))
            for pos in range(len(items) - 1):
                scores = walker.step(items[pos])
                rank = _masked_rank(scores, items[pos + 1], base_mask)
                result.outcomes.append(TargetOutcome(
                    user.user_index, ordinal, len(items), n_history, pos + 2, rank))
            walker.consume(items[-1])
    return result


def _masked_rank(scores, target, base_mask):
    return rank_of_target(scores, target, base_mask)


def headline_metrics(result):
    """Per-target Recall, MRR, and Precision at the result's cutoff.

    Each prediction has exactly one relevant item, so Precision@N is
    Recall@N / N by definition; it is computed through that identity.
    """
    n = result.cutoff
    ranks = np.asarray([o.rank for o in result.outcomes], dtype=np.int64)
    if ranks.size == 0:
        return {"recall": 0.0, "mrr": 0.0, "precision": 0.0, "n_targets": 0}
    hits = ranks <= n
    recall = float(np.mean(hits))
    mrr = float(np.mean(np.where(hits, 1.0 / np.maximum(ranks, 1), 0.0)))
    return {"recall": recall, "mrr": mrr, "precision": recall / n,
            "n_targets": int(ranks.size)}


def _session_groups(outcomes):
    groups = {}
    for o in outcomes:
        groups.setdefault((o.user_index, o.session_ordinal), []).append(o)
    return groups


def _session_averaged(outcome_lists, cutoff):
    """Average metrics within each session, then across sessions."""
    if not outcome_lists:
        return {"recall": 0.0, "mrr": 0.0, "precision": 0.0, "sessions": 0}
    recalls, mrrs = [], []
    for outcomes in outcome_lists:
        ranks = np.asarray([o.rank for o in outcomes], dtype=np.int64)
        hits = ranks <= cutoff
        recalls.append(float(np.mean(hits)))
        mrrs.append(float(np.mean(np.where(hits, 1.0 / np.maximum(ranks, 1), 0.0))))
    recall = float(np.mean(recalls))
    return {"recall": recall, "mrr": float(np.mean(mrrs)),
            "precision": recall / cutoff, "sessions": len(outcome_lists)}


def breakdown_by_history_length(result, boundary=6):
    """Session-averaged metrics split by the user's history depth: sessions
    of users with at most ``boundary`` training sessions are "short", the
    rest "long"."""
    short, long_ = [], []
    for session_outcomes in _session_groups(result.outcomes).values():
        target = short if session_outcomes[0].history_sessions <= boundary else long_
        target.append(session_outcomes)
    return {"short": _session_averaged(short, result.cutoff),
            "long": _session_averaged(long_, result.cutoff)}


def breakdown_by_position(result, key="target"):
    """Session-averaged metrics for the beginning (positions 1-2), middle
    (3-4), and end (5+) of sessions holding at least 5 events.

    ``key`` selects the grouping coordinate: the target's position in the
    session, or the number of consumed events (the prefix length).
    """
    if key not in ("target", "prefix"):
        raise ValueError(f"position key must be 'target' or 'prefix', got {key!r}")
    buckets = {"begin": {}, "middle": {}, "end": {}}
    for (sid, outcomes) in _session_groups(result.outcomes).items():
        if outcomes[0].session_length < 5:
            continue
        for o in outcomes:
            coord = o.position if key == "target" else o.position - 1
            name = "begin" if coord <= 2 else ("middle" if coord <= 4 else "end")
            buckets[name].setdefault(sid, []).append(o)
    out = {}
    for name, sessions in buckets.items():
        out[name] = _session_averaged(list(sessions.values()), result.cutoff)
    return out


def aggregate_headlines(headlines):
    """Mean of each headline metric across seeds."""
    keys = ("recall", "mrr", "precision")
    agg = {k: float(np.mean([h[k] for h in headlines])) for k in keys}
    agg["n_targets"] = int(headlines[0]["n_targets"]) if headlines else 0
    agg["seeds"] = len(headlines)
    return agg


def aggregate_breakdowns(breakdowns):
    """Per-group median of each metric across seeds."""
    if not breakdowns:
        return {}
    out = {}
    for group in breakdowns[0]:
        out[group] = {}
        for metric in ("recall", "mrr", "precision"):
            out[group][metric] = float(median(b[group][metric] for b in breakdowns))
        out[group]["sessions"] = breakdowns[0][group]["sessions"]
    return out


def report_rows(model_name, cutoff, headline, history_breakdown=None,
                position_breakdown=None, seeds=1):
    """Flatten evaluation output into (model, metric, cutoff, group, value,
    seeds) rows ready for a TSV report."""
    rows = []
    for metric in ("recall", "mrr", "precision"):
        rows.append({"model": model_name, "metric": metric, "cutoff": cutoff,
                     "group": "all", "value": headline[metric], "seeds": seeds})
    for breakdown, prefix in ((history_breakdown, "history"), (position_breakdown, "position")):
        if not breakdown:
            continue
        for group, metrics in breakdown.items():
            for metric in ("recall", "mrr", "precision"):
                rows.append({"model": model_name, "metric": metric, "cutoff": cutoff,
                             "group": f"{prefix}:{group}", "value": metrics[metric],
                             "seeds": seeds})
    return rows


def write_report_tsv(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("model\tmetric\tcutoff\tgroup\tvalue\tseeds\n")
        for r in rows:
            fh.write(f"{r['model']}\t{r['metric']}\t{r['cutoff']}\t{r['group']}"
                     f"\t{r['value']!r}\t{r['seeds']}\n")


def format_report(rows):
    """Human-readable table of report rows."""
    header = f"{'model':<14} {'metric':<10} {'cutoff':>6} {'group':<16} {'value':>10} {'seeds':>5}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r['model']:<14} {r['metric']:<10} {r['cutoff']:>6} "
                     f"{r['group']:<16} {r['value']:>10.4f} {r['seeds']:>5}")
    return "\n".join(lines)
