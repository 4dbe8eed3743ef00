"""Command-line interface: train, eval, attack, visualize, neighbors.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 checkpoint error.
Set ``ADVTEXT_LOG_LEVEL`` (e.g. DEBUG, INFO) to change log verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, data, interpret, perturb
from .config import ConfigError, build_config, read_config
from .data import DataFormatError
from .models import Batch
from .pipeline import encode, encode_labels, train_model
from .train import METHODS, predict
from .vocab import nearest_neighbors

log = logging.getLogger("advtext")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load_records(path, task: str, labeled: bool = True):
    try:
        if task == "tag":
            return data.load_tagging(path)
        return data.load_classification(path, labeled=labeled)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_DATA) from None
    except DataFormatError as exc:
        raise CliError(str(exc), EXIT_DATA) from None


def _load_model(path):
    try:
        return checkpoint.load(path)
    except checkpoint.CheckpointError as exc:
        raise CliError(f"{path}: {exc}", EXIT_CHECKPOINT) from None


def _out(line: str) -> None:
    sys.stdout.write(line + "\n")


# -- train --------------------------------------------------------------------

CLI_KEYS = {
    "method": "method",
    "task": "task",
    "preset": "preset",
    "epsilon": "epsilon",
    "lam": "lam",
    "xi": "xi",
    "k_neighbors": "k_neighbors",
    "seed": "seed",
    "max_epochs": "max_epochs",
    "patience": "patience",
    "batch_size": "batch_size",
    "emb_dim": "emb_dim",
    "hidden": "hidden",
    "ffnn_hidden": "ffnn_hidden",
    "dropout_rate": "dropout_rate",
    "learning_rate": "learning_rate",
}


def cmd_train(args) -> int:
    file_values = read_config(args.config) if args.config else {}
    cli_values = {key: getattr(args, attr) for attr, key in CLI_KEYS.items()}
    for item in args.set or []:
        from .config import coerce

        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = coerce(*item.split("=", 1))
        cli_values[k] = v
    config = build_config(file_values, cli_values)
    ds = data.Dataset(
        train=_load_records(args.train, config.task),
        dev=_load_records(args.dev, config.task) if args.dev else [],
    )
    if not ds.train:
        raise CliError(f"{args.train}: no training records", EXIT_DATA)
    if args.unlabeled:
        if config.task == "tag":
            ds.unlabeled = [data.TaggingRecord(r.tokens, (0,) * len(r.tokens)) for r in _load_records(args.unlabeled, "tag")]
        else:
            ds.unlabeled = _load_records(args.unlabeled, "classify", labeled=False)
    elif config.method in ("vat", "ivat", "random-vat"):
        log.warning("%s without --unlabeled: KL term uses the labeled batches only", config.method)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log")
    with open(log_path, "w", encoding="utf-8") as fh:
        trained = train_model(ds, config, log_stream=fh, vectors_path=args.vectors)
    checkpoint.save(args.out, trained.params, trained.vocab, trained.label_names, config)
    res = trained.result
    name = "f0.5" if config.task == "tag" else "error_rate"
    _out(f"best_epoch\t{res.best_epoch + 1}")
    _out(f"dev_{name}\t{res.history[res.best_epoch]:.6f}")
    return EXIT_OK


# -- eval ---------------------------------------------------------------------


def evaluate(params, vocab, label_names, records) -> tuple[dict, list]:
    seqs = encode(records, vocab)
    gold = encode_labels(records, params.task, label_names)
    preds = predict(params, seqs, pad_id=vocab.pad_id)
    if params.task == "classify":
        err = interpret.error_rate(preds, gold)
        return {"n": len(gold), "error_rate": err, "accuracy": 1.0 - err}, preds
    flat_p = [x for row in preds for x in row]
    flat_g = [x for row in gold for x in row]
    p, r = interpret.precision_recall(flat_p, flat_g)
    return {"n_tokens": len(flat_g), "precision": p, "recall": r, "f0.5": interpret.f_half_score(flat_p, flat_g)}, preds


def cmd_eval(args) -> int:
    params, vocab, label_names, config = _load_model(args.model)
    records = _load_records(args.data, params.task)
    if not records:
        raise CliError(f"{args.data}: no records", EXIT_DATA)
    try:
        metrics, preds = evaluate(params, vocab, label_names, records)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    for k, v in metrics.items():
        _out(f"{k}\t{v:.6f}" if isinstance(v, float) else f"{k}\t{v}")
    if args.dump_predictions:
        with open(args.dump_predictions, "w", encoding="utf-8") as fh:
            for p in preds:
                fh.write((" ".join(map(str, p)) if isinstance(p, list) else str(p)) + "\n")
    return EXIT_OK


# -- attack / visualize ---------------------------------------------------------


def _gold(params, label_names, rec):
    if params.task == "tag":
        return list(rec.labels)
    if rec.label is None:
        return None
    if rec.label not in label_names:
        raise CliError(f"label {rec.label!r} not known to the model", EXIT_DATA)
    return label_names.index(rec.label)


def _label_name(params, label_names, pred):
    if params.task == "tag":
        return pred
    return label_names[pred]


def cmd_attack(args) -> int:
    params, vocab, label_names, config = _load_model(args.model)
    method = args.method or config.method
    if method not in perturb.RESTRICTED:
        raise CliError(
            f"model was trained with {config.method!r}; pass --method with one of {', '.join(perturb.RESTRICTED)}",
            EXIT_USAGE,
        )
    records = _load_records(args.data, params.task)
    k = args.k or config.k_neighbors
    report = interpret.HeatmapReport(Path(args.model).name, method, config.epsilon)
    n_flip = 0
    deltas = []
    for rec in records:
        ids = vocab.encode(rec.tokens)
        gold = _gold(params, label_names, rec)
        pert = interpret.sentence_alpha(params, ids, gold, k=k, eps=config.epsilon, metric=config.neighbor_metric)
        res = interpret.reconstruct_adversarial_text(
            params, ids, gold, pert.alpha[0], pert.neighbors[0], vocab.id_to_token, args.n_subs
        )
        res.pred_before = _label_name(params, label_names, res.pred_before)
        res.pred_after = _label_name(params, label_names, res.pred_after)
        ranked = interpret.rank_alpha(pert.alpha[0], pert.neighbors[0])
        cells = interpret.heatmap_cells(ranked, vocab.id_to_token, args.top_m)
        report.sentences.append(interpret.SentenceReport(list(res.tokens), cells, res))
        n_flip += res.flipped
        deltas.append(res.loss_after - res.loss_before)
    interpret.export_report(report, args.out, "json")
    n = max(len(records), 1)
    _out(f"n\t{len(records)}")
    _out(f"flip_rate\t{n_flip / n:.6f}")
    _out(f"mean_loss_delta\t{(sum(deltas) / n) if deltas else 0.0:.6f}")
    _out(f"loss_increase_rate\t{sum(d > 0 for d in deltas) / n:.6f}")
    return EXIT_OK


def visualize_sentence(params, vocab, label_names, config, rec, method, top_m, rng) -> interpret.SentenceReport:
    ids = vocab.encode(rec.tokens)
    gold = _gold(params, label_names, rec)
    batch = Batch.from_sequences([ids], None if gold is None else [gold])
    if method in ("advt", "iadvt", "iadvt-best") and gold is None:
        pred = predict(params, [ids], pad_id=vocab.pad_id)[0]
        batch = Batch.from_sequences([ids], [pred])
    eps = config.epsilon
    pert = perturb.generate(
        method, params, batch, eps, rng, xi=config.xi, k=config.k_neighbors, metric=config.neighbor_metric
    )
    ranked = interpret.top_direction_words(pert, 0, batch.ids[0], params.embedding.data)
    return interpret.SentenceReport(list(rec.tokens), interpret.heatmap_cells(ranked, vocab.id_to_token, top_m))


def cmd_visualize(args) -> int:
    params, vocab, label_names, config = _load_model(args.model)
    method = args.method or config.method
    if method not in perturb.SCHEMES:
        raise CliError(f"cannot visualize method {method!r}; choose from {', '.join(perturb.SCHEMES)}", EXIT_USAGE)
    records = _load_records(args.data, params.task)
    rng = np.random.default_rng(args.seed)
    report = interpret.HeatmapReport(Path(args.model).name, method, config.epsilon)
    for rec in records:
        report.sentences.append(visualize_sentence(params, vocab, label_names, config, rec, method, args.top_m, rng))
    interpret.export_report(report, args.out, args.format)
    _out(f"sentences\t{len(report.sentences)}")
    return EXIT_OK


# -- neighbors ------------------------------------------------------------------


def cmd_neighbors(args) -> int:
    params, vocab, _, config = _load_model(args.model)
    if args.word in vocab:
        wid = vocab.token_to_id[args.word]
    else:
        log.warning("%r is not in the vocabulary; using %s", args.word, vocab.id_to_token[vocab.unk_id])
        wid = vocab.unk_id
    res = nearest_neighbors(params.embedding, wid, args.k, vocab.special_ids, config.neighbor_metric)
    if res.shortfall:
        log.warning("only %d eligible neighbors", len(res.ids))
    for i, d in zip(res.ids, res.distances):
        _out(f"{vocab.id_to_token[i]}\t{d:.10g}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advtext", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--train", required=True)
    t.add_argument("--dev")
    t.add_argument("--unlabeled")
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="training log path (default: OUT.log)")
    t.add_argument("--vectors", help="pretrained vectors text file")
    t.add_argument("--method", choices=METHODS)
    t.add_argument("--task", choices=("classify", "tag"))
    t.add_argument("--preset", choices=("sec", "cac", "ged"))
    t.add_argument("--epsilon", type=float)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--xi", type=float)
    t.add_argument("--k", dest="k_neighbors", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--max-epochs", dest="max_epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--emb-dim", dest="emb_dim", type=int)
    t.add_argument("--hidden", type=int)
    t.add_argument("--ffnn-hidden", dest="ffnn_hidden", type=int)
    t.add_argument("--dropout", dest="dropout_rate", type=float)
    t.add_argument("--lr", dest="learning_rate", type=float)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--dump-predictions")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("attack", help="reconstruct adversarial texts")
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--n-subs", dest="n_subs", type=int, default=1)
    a.add_argument("--out", required=True)
    a.add_argument("--method", choices=perturb.RESTRICTED)
    a.add_argument("--k", type=int)
    a.add_argument("--top-m", dest="top_m", type=int, default=3)
    a.set_defaults(func=cmd_attack)

    v = sub.add_parser("visualize", help="perturbation heatmaps")
    v.add_argument("--model", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--method", choices=perturb.SCHEMES)
    v.add_argument("--top-m", dest="top_m", type=int, default=3)
    v.add_argument("--out", required=True)
    v.add_argument("--format", choices=("json", "html"), default="json")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_visualize)

    n = sub.add_parser("neighbors", help="nearest neighbors of a word")
    n.add_argument("--model", required=True)
    n.add_argument("--word", required=True)
    n.add_argument("--k", type=int, default=10)
    n.set_defaults(func=cmd_neighbors)
    return p


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("ADVTEXT_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except CliError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return exc.code
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_USAGE
    except checkpoint.CheckpointError as exc:
        sys.stderr.write(f"checkpoint error: {exc}\n")
        return EXIT_CHECKPOINT
    except (DataFormatError, ValueError) as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
