"""Glue between records, vocabulary, model and training loop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ClassificationRecord, Dataset, TaggingRecord
from .models import ModelParams, init_params
from .train import EncodedData, FitResult, TrainConfig, fit
from .vocab import Vocabulary, build_vocab, normalize_embedding


@dataclass
class Trained:
    params: ModelParams
    vocab: Vocabulary
    label_names: list[str]
    config: TrainConfig
    result: FitResult | None = None


def label_names_for(records, task: str) -> list[str]:
    if task == "tag":
        return ["0", "1"]
    return sorted({r.label for r in records if r.label is not None})


def encode_labels(records, task: str, label_names: list[str]):
    if task == "tag":
        return [list(r.labels) for r in records]
    index = {name: i for i, name in enumerate(label_names)}
    try:
        return [index[r.label] for r in records]
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]!r} not among {label_names}") from None


def encode(records, vocab: Vocabulary) -> list[list[int]]:
    return [vocab.encode(r.tokens) for r in records]


def vocab_for(dataset: Dataset, config: TrainConfig) -> Vocabulary:
    corpus = (tok for split in (dataset.train, dataset.unlabeled) for r in split for tok in r.tokens)
    return build_vocab(corpus, config.min_freq, config.max_vocab)


def encode_dataset(dataset: Dataset, vocab: Vocabulary, label_names: list[str], task: str) -> EncodedData:
    return EncodedData(
        train_ids=encode(dataset.train, vocab),
        train_labels=encode_labels(dataset.train, task, label_names),
        unlabeled_ids=encode(dataset.unlabeled, vocab),
        dev_ids=encode(dataset.dev, vocab),
        dev_labels=encode_labels(dataset.dev, task, label_names) if dataset.dev else [],
        pad_id=vocab.pad_id,
    )


def new_model(config: TrainConfig, vocab: Vocabulary, n_classes: int, freqs: np.ndarray | None = None) -> ModelParams:
    rng = np.random.default_rng(config.seed)
    params = init_params(config.task, len(vocab), config.emb_dim, config.hidden, config.ffnn_hidden, n_classes, rng)
    if config.normalize_embeddings and freqs is not None:
        params.embedding.data[:] = normalize_embedding(params.embedding.data, freqs)
    return params


def token_freqs(dataset: Dataset, vocab: Vocabulary) -> np.ndarray:
    freqs = np.ones(len(vocab))
    for split in (dataset.train, dataset.unlabeled):
        for r in split:
            for i in vocab.encode(r.tokens):
                freqs[i] += 1
    return freqs


def train_model(dataset: Dataset, config: TrainConfig, log_stream=None, vectors_path=None) -> Trained:
    from .vocab import load_pretrained_vectors

    vocab = vocab_for(dataset, config)
    names = label_names_for(dataset.train, config.task)
    data = encode_dataset(dataset, vocab, names, config.task)
    params = new_model(config, vocab, len(names), token_freqs(dataset, vocab))
    if vectors_path is not None:
        load_pretrained_vectors(vectors_path, vocab, params.embedding.data)
    result = fit(params, data, config, log_stream)
    return Trained(result.params, vocab, names, config, result)


def is_tagging(records) -> bool:
    return bool(records) and isinstance(records[0], TaggingRecord)


def is_classification(records) -> bool:
    return bool(records) and isinstance(records[0], ClassificationRecord)
