"""Command-line interface: preprocess, train, eval, search.

Options may come from flags, a ``--config`` JSON file of per-command
defaults, or SESSREC_* environment variables.  Exit codes: 0 success,
1 usage or invalid value, 2 data/vocabulary/filesystem problems,
3 training divergence.
"""

from __future__ import annotations

import json
import logging
import math
import sys

import click
import numpy as np

from .baselines import ItemKnn, PersonalPop, concat_sessions
from .checkpoint import load_model, save_model
from .corpus import (
    SplitSpec,
    derive_validation,
    load_corpus_dir,
    load_events,
    preprocess_events,
    write_corpus_dir,
)
from .evaluate import (
    ConcatWalker,
    EvalConfig,
    HrnnWalker,
    KnnWalker,
    PpopWalker,
    RnnWalker,
    aggregate_breakdowns,
    aggregate_headlines,
    breakdown_by_history_length,
    breakdown_by_position,
    evaluate_model,
    format_report,
    headline_metrics,
    report_rows,
    write_report_tsv,
)
from .hrnn import Hrnn
from .losses import LOSSES
from .session_rnn import SessionRnn
from .validation import CorpusFormatError, DivergenceError, VocabMismatchError

logger = logging.getLogger(__name__)

MODEL_KINDS = ("rnn", "rnn-concat", "hrnn-init", "hrnn-all", "ppop", "itemknn")
NEURAL_KINDS = ("rnn", "rnn-concat", "hrnn-init", "hrnn-all")


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="JSON file with per-command option defaults.")
@click.option("-q", "--quiet", is_flag=True, help="Suppress progress logging.")
@click.pass_context
def cli(ctx, config_path, quiet):
    """Personalized session-based recommendation toolkit."""
    logging.basicConfig(level=logging.WARNING if quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if config_path:
        with open(config_path, "r", encoding="utf-8") as fh:
            ctx.default_map = json.load(fh)


@cli.command()
@click.option("--events", "events_path", required=True,
              type=click.Path(exists=True, dir_okay=False), help="Raw event log (TSV/CSV).")
@click.option("--corpus-dir", required=True, type=click.Path(file_okay=False),
              help="Output directory for the train/valid/test splits.")
@click.option("--delimiter", default="\t", help="Event log column delimiter.")
@click.option("--idle-threshold", default=1800, show_default=True,
              help="Seconds of inactivity that start a new session.")
@click.option("--min-item-support", default=1, show_default=True)
@click.option("--min-session-length", default=3, show_default=True)
@click.option("--min-user-sessions", default=5, show_default=True)
@click.option("--drop-type", multiple=True, help="Interaction type to discard (repeatable).")
@click.option("--dedup/--no-dedup", default=False, show_default=True,
              help="Drop repeated (item, type) pairs within a session.")
def preprocess(events_path, corpus_dir, delimiter, idle_threshold, min_item_support,
               min_session_length, min_user_sessions, drop_type, dedup):
    """Sessionize and filter an event log, then split and persist it."""
    spec = SplitSpec(idle_threshold_s=idle_threshold,
                     min_item_support=min_item_support,
                     min_session_len=min_session_length,
                     min_user_sessions=min_user_sessions,
                     dropped_types=tuple(drop_type),
                     dedup_same_type_in_session=dedup)
    events = load_events(events_path, delimiter=delimiter)
    train, valid, test = preprocess_events(events, spec)
    write_corpus_dir(corpus_dir, train, valid, test, spec)
    click.echo(f"train: {len(train.users)} users, {train.n_sessions()} sessions, "
               f"{train.n_events()} events, {train.n_items} items")
    click.echo(f"valid: {valid.n_sessions()} sessions   test: {test.n_sessions()} sessions")
    click.echo(f"wrote {corpus_dir}")


def _build_model(kind, hidden, user_hidden, loss, batch, epochs, lr, momentum,
                 dropout, dropout_user, dropout_init, seed, knn_k):
    if kind in ("rnn", "rnn-concat"):
        return SessionRnn(hidden_size=hidden, loss=loss, batch_size=batch, epochs=epochs,
                          learning_rate=lr, momentum=momentum, dropout_hidden=dropout,
                          seed=seed)
    if kind in ("hrnn-init", "hrnn-all"):
        return Hrnn(variant=kind.split("-")[1], hidden_size=hidden,
                    user_hidden_size=user_hidden, loss=loss, batch_size=batch,
                    epochs=epochs, learning_rate=lr, momentum=momentum,
                    dropout_user=dropout_user, dropout_session=dropout,
                    dropout_init=dropout_init, seed=seed)
    if kind == "ppop":
        return PersonalPop()
    if kind == "itemknn":
        return ItemKnn(k=knn_k)
    raise ValueError(f"unknown model kind {kind!r}")


def _fit_for_kind(model, kind, train_corpus):
    corpus = concat_sessions(train_corpus) if kind == "rnn-concat" else train_corpus
    model.fit(corpus)
    return model


@cli.command()
@click.option("--corpus-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--model", "kind", type=click.Choice(MODEL_KINDS), default="hrnn-init",
              show_default=True)
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False),
              help="Output checkpoint path.")
@click.option("--hidden", default=100, show_default=True, help="Session-level hidden width.")
@click.option("--user-hidden", default=None, type=int,
              help="User-level hidden width (defaults to --hidden).")
@click.option("--loss", type=click.Choice(LOSSES), default="top1", show_default=True)
@click.option("--batch", default=50, show_default=True)
@click.option("--epochs", default=10, show_default=True)
@click.option("--lr", default=0.1, show_default=True)
@click.option("--momentum", default=0.0, show_default=True)
@click.option("--dropout", default=0.0, show_default=True,
              help="Dropout on the session-level hidden state.")
@click.option("--dropout-user", default=0.0, show_default=True,
              help="Dropout on the user-level state (hierarchical models).")
@click.option("--dropout-init", default=0.0, show_default=True,
              help="Dropout on the initialized session state (hierarchical models).")
@click.option("--seed", default=0, show_default=True)
@click.option("--knn-k", default=300, show_default=True, help="Neighborhood size for itemknn.")
def train(corpus_dir, kind, checkpoint, hidden, user_hidden, loss, batch, epochs,
          lr, momentum, dropout, dropout_user, dropout_init, seed, knn_k):
    """Fit a model on the train split and write a checkpoint."""
    train_corpus, _, _, _ = load_corpus_dir(corpus_dir)
    model = _build_model(kind, hidden, user_hidden, loss, batch, epochs, lr, momentum,
                         dropout, dropout_user, dropout_init, seed, knn_k)
    _fit_for_kind(model, kind, train_corpus)
    save_model(model, checkpoint, kind=kind)
    losses = getattr(model, "train_loss_per_epoch_", None)
    if losses:
        click.echo(f"final training loss {losses[-1]:.6f}")
    click.echo(f"wrote {checkpoint}")


def _make_walker(model, kind):
    if kind == "rnn":
        return RnnWalker(model)
    if kind == "rnn-concat":
        return ConcatWalker(model)
    if kind in ("hrnn-init", "hrnn-all"):
        return HrnnWalker(model)
    if kind == "ppop":
        return PpopWalker(model)
    if kind == "itemknn":
        return KnnWalker(model)
    raise ValueError(f"unknown model kind {kind!r}")


def _top_supported(corpus, m):
    counts = np.zeros(corpus.n_items, dtype=np.int64)
    for _, session in corpus.iter_sessions():
        for item in session.items:
            counts[item] += 1
    order = np.lexsort((np.arange(corpus.n_items), -counts))
    return order[:m]


@cli.command("eval")
@click.option("--corpus-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--cutoff", default=5, show_default=True)
@click.option("--candidates", default=0, show_default=True,
              help="Rank against the M most supported items plus the target (0 ranks all).")
@click.option("--seeds", default=1, show_default=True,
              help="Evaluate this many training seeds (first uses the checkpoint as-is).")
@click.option("--position-key", type=click.Choice(("target", "prefix")), default="target",
              show_default=True, help="Coordinate for the position breakdown.")
@click.option("--report", "report_base", default=None, type=click.Path(dir_okay=False),
              help="Write <base>.tsv and <base>.txt reports.")
def eval_cmd(corpus_dir, checkpoint, cutoff, candidates, seeds, position_key, report_base):
    """Evaluate a checkpoint on the test split (sequential next-item protocol)."""
    train_corpus, _, test_corpus, _ = load_corpus_dir(corpus_dir)
    model, kind = load_model(checkpoint)
    corpus_hash = train_corpus.item_vocab.content_hash()
    if model.vocab_hash_ is not None and model.vocab_hash_ != corpus_hash:
        raise VocabMismatchError(
            f"checkpoint vocabulary {model.vocab_hash_} does not match corpus {corpus_hash}")
    candidate_items = _top_supported(train_corpus, candidates) if candidates > 0 else None
    cfg = EvalConfig(cutoff=cutoff, candidate_items=candidate_items,
                     position_key=position_key)

    if seeds > 1 and kind not in NEURAL_KINDS:
        logger.warning("%s training is deterministic; ignoring --seeds", kind)
        seeds = 1
    models = [model]
    for i in range(1, seeds):
        params = dict(model.get_params())
        params["seed"] = int(params.get("seed", 0)) + i
        retrained = type(model)(**params)
        logger.info("retraining with seed %d (%d/%d)", params["seed"], i + 1, seeds)
        _fit_for_kind(retrained, kind, train_corpus)
        models.append(retrained)

    headlines, history_bds, position_bds = [], [], []
    for m in models:
        result = evaluate_model(_make_walker(m, kind), test_corpus, train_corpus, cfg)
        headlines.append(headline_metrics(result))
        history_bds.append(breakdown_by_history_length(result))
        position_bds.append(breakdown_by_position(result, key=position_key))
        if result.skipped_users:
            logger.warning("skipped %d users with no training history", result.skipped_users)

    headline = aggregate_headlines(headlines)
    rows = report_rows(kind, cutoff, headline,
                       aggregate_breakdowns(history_bds),
                       aggregate_breakdowns(position_bds), seeds=len(models))
    click.echo(format_report(rows))
    click.echo(f"targets ranked: {headline['n_targets']}")
    if report_base:
        write_report_tsv(report_base + ".tsv", rows)
        with open(report_base + ".txt", "w", encoding="utf-8") as fh:
            fh.write(format_report(rows) + "\n")
        click.echo(f"wrote {report_base}.tsv and {report_base}.txt")


def _parse_range(text, name):
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise click.BadParameter(f"{name} must be 'low,high', got {text!r}") from exc
    if not lo <= hi:
        raise click.BadParameter(f"{name}: low must not exceed high, got {text!r}")
    return lo, hi


@cli.command()
@click.option("--corpus-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--model", "kind", type=click.Choice(("rnn", "hrnn-init", "hrnn-all")),
              default="hrnn-init", show_default=True)
@click.option("--trials", required=True, type=int, help="Number of random configurations.")
@click.option("--seed", default=0, show_default=True)
@click.option("--epochs", default=5, show_default=True)
@click.option("--hidden", default=100, show_default=True)
@click.option("--cutoff", default=5, show_default=True)
@click.option("--lr-range", default="0.02,0.3", show_default=True,
              help="Log-uniform learning-rate range 'low,high'.")
@click.option("--reg-range", default="0.0,0.3", show_default=True,
              help="Uniform range for momentum and dropout rates.")
@click.option("--batch-choices", default="50,100", show_default=True)
@click.option("--report", "report_base", default=None, type=click.Path(dir_okay=False),
              help="Write <base>.tsv trials and <base>.json best configuration.")
def search(corpus_dir, kind, trials, seed, epochs, hidden, cutoff, lr_range,
           reg_range, batch_choices, report_base):
    """Random hyperparameter search scored on a validation holdout.

    The holdout is re-derived from the train split in memory (last session of
    each user), so trial models never see their validation targets.
    """
    if trials <= 0:
        raise click.BadParameter("--trials must be positive")
    lr_lo, lr_hi = _parse_range(lr_range, "--lr-range")
    if lr_lo <= 0:
        raise click.BadParameter("--lr-range must be positive for log-uniform sampling")
    reg_lo, reg_hi = _parse_range(reg_range, "--reg-range")
    try:
        batches = [int(v) for v in batch_choices.split(",") if v.strip()]
    except ValueError as exc:
        raise click.BadParameter(f"--batch-choices must be integers, got {batch_choices!r}") from exc

    train_corpus, _, _, _ = load_corpus_dir(corpus_dir)
    core, holdout = derive_validation(train_corpus)
    cfg = EvalConfig(cutoff=cutoff)
    trials_rows = []
    for trial in range(trials):
        trng = np.random.default_rng([seed, trial])
        lr = math.exp(trng.uniform(math.log(lr_lo), math.log(lr_hi)))
        momentum = float(trng.uniform(reg_lo, reg_hi))
        dropout = float(trng.uniform(reg_lo, reg_hi))
        dropout_user = float(trng.uniform(reg_lo, reg_hi))
        dropout_init = float(trng.uniform(reg_lo, reg_hi))
        batch = int(batches[int(trng.integers(len(batches)))])
        model = _build_model(kind, hidden, None, "top1", batch, epochs, lr, momentum,
                             dropout, dropout_user, dropout_init, seed, 300)
        model.fit(core)
        result = evaluate_model(_make_walker(model, kind), holdout, core, cfg)
        headline = headline_metrics(result)
        row = {"trial": trial, "lr": lr, "momentum": momentum, "dropout": dropout,
               "dropout_user": dropout_user, "dropout_init": dropout_init,
               "batch": batch, "recall": headline["recall"], "mrr": headline["mrr"]}
        trials_rows.append(row)
        logger.info("trial %d/%d  lr %.4f batch %d  recall@%d %.4f",
                    trial + 1, trials, lr, batch, cutoff, headline["recall"])
    best = max(trials_rows, key=lambda r: r["recall"])
    click.echo(json.dumps({"best": best}, sort_keys=True))
    if report_base:
        keys = list(trials_rows[0])
        with open(report_base + ".tsv", "w", encoding="utf-8") as fh:
            fh.write("\t".join(keys) + "\n")
            for row in trials_rows:
                fh.write("\t".join(repr(row[k]) if isinstance(row[k], float) else str(row[k])
                                   for k in keys) + "\n")
        with open(report_base + ".json", "w", encoding="utf-8") as fh:
            json.dump(best, fh, indent=2, sort_keys=True)
            fh.write("\n")
        click.echo(f"wrote {report_base}.tsv and {report_base}.json")


def main(argv=None):
    """Console entry point with stable exit codes."""
    try:
        cli.main(args=argv, standalone_mode=False, auto_envvar_prefix="SESSREC")
        return 0
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except DivergenceError as exc:
        logger.error("%s", exc)
        return 3
    except (CorpusFormatError, VocabMismatchError, OSError) as exc:
        logger.error("%s", exc)
        return 2
    except ValueError as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
