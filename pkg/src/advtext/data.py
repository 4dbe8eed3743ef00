"""Corpus loaders and writers, plus a synthetic planted-keyword task.

Formats (UTF-8, whitespace tokenized):

* classification, labeled: ``label<TAB>tok tok ...`` one per line
* classification, unlabeled: ``tok tok ...`` one per line
* tagging: ``token<TAB>label`` per line, blank line between sentences,
  labels 0 (correct) or 1 (error)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .vocab import EOS

log = logging.getLogger(__name__)

POS, NEG = "pos", "neg"


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ClassificationRecord:
    tokens: tuple[str, ...]
    label: str | None = None


@dataclass(frozen=True)
class TaggingRecord:
    tokens: tuple[str, ...]
    labels: tuple[int, ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.labels):
            raise DataFormatError("tokens and labels differ in length")
        if any(lab not in (0, 1) for lab in self.labels):
            raise DataFormatError("tag labels must be 0 or 1")


@dataclass
class Dataset:
    train: list = field(default_factory=list)
    unlabeled: list = field(default_factory=list)
    dev: list = field(default_factory=list)
    test: list = field(default_factory=list)


def _check_tokens(tokens, where: str) -> None:
    for tok in tokens:
        if "\t" in tok:
            raise DataFormatError(f"{where}: token contains a TAB")


def load_classification(path: str | Path, labeled: bool = True, append_eos: bool = True) -> list[ClassificationRecord]:
    records = []
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line:
                skipped += 1
                continue
            label = None
            if labeled:
                if "\t" not in line:
                    raise DataFormatError(f"{path}:{lineno}: missing TAB between label and text")
                label, text = line.split("\t", 1)
                label = label.strip()
            else:
                text = line
            tokens = text.split()
            if not tokens:
                raise DataFormatError(f"{path}:{lineno}: no tokens")
            if append_eos and tokens[-1] != EOS:
                tokens.append(EOS)
            records.append(ClassificationRecord(tuple(tokens), label))
    if skipped:
        log.info("%s: skipped %d empty lines", path, skipped)
    if not records:
        log.warning("%s: no records", path)
    return records


def write_classification(path: str | Path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            _check_tokens(rec.tokens, str(path))
            text = " ".join(rec.tokens)
            fh.write(f"{rec.label}\t{text}\n" if rec.label is not None else text + "\n")


def load_tagging(path: str | Path) -> list[TaggingRecord]:
    records = []
    tokens: list[str] = []
    labels: list[int] = []

    def flush():
        if tokens:
            records.append(TaggingRecord(tuple(tokens), tuple(labels)))
            tokens.clear()
            labels.clear()

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                flush()
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataFormatError(f"{path}:{lineno}: expected token<TAB>label")
            tok, lab = parts[0].strip(), parts[1].strip()
            if lab not in ("0", "1"):
                raise DataFormatError(f"{path}:{lineno}: label must be 0 or 1, got {lab!r}")
            tokens.append(tok)
            labels.append(int(lab))
    flush()
    if not records:
        log.warning("%s: no records", path)
    return records


def write_tagging(path: str | Path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            _check_tokens(rec.tokens, str(path))
            for tok, lab in zip(rec.tokens, rec.labels):
                fh.write(f"{tok}\t{lab}\n")
            fh.write("\n")


@dataclass
class SyntheticConfig:
    vocab_size: int = 200
    n_train: int = 2000
    n_unlabeled: int = 4000
    n_dev: int = 500
    n_test: int = 500
    seed: int = 0
    n_keywords: int = 30  # per class
    max_major: int = 3
    margin: int = 1  # majority count minus minority count; 0 = random minority count
    min_len: int = 8
    max_len: int = 20


def keyword_sets(cfg: SyntheticConfig) -> tuple[list[str], list[str], list[str]]:
    """(positive keywords, negative keywords, filler words)."""
    n_filler = cfg.vocab_size - 2 * cfg.n_keywords
    if cfg.n_keywords < 1 or n_filler < 1:
        raise ValueError(f"vocab_size {cfg.vocab_size} too small for {cfg.n_keywords} keywords per class")
    pos = [f"good{i}" for i in range(cfg.n_keywords)]
    neg = [f"bad{i}" for i in range(cfg.n_keywords)]
    filler = [f"w{i}" for i in range(n_filler)]
    return pos, neg, filler


def keyword_label(tokens, pos: set[str], neg: set[str]) -> str | None:
    n_pos = sum(t in pos for t in tokens)
    n_neg = sum(t in neg for t in tokens)
    if n_pos == n_neg:
        return None
    return POS if n_pos > n_neg else NEG


def _sentence(rng: np.random.Generator, cfg, pos, neg, filler) -> tuple[tuple[str, ...], str]:
    label = POS if rng.random() < 0.5 else NEG
    major, minor = (pos, neg) if label == POS else (neg, pos)
    length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    n_major = int(rng.integers(1, cfg.max_major + 1))
    if cfg.margin > 0:
        n_minor = max(n_major - cfg.margin, 0)
    else:
        n_minor = int(rng.integers(0, n_major))
    words = [filler[i] for i in rng.integers(0, len(filler), size=length)]
    slots = rng.choice(length, size=n_major + n_minor, replace=False)
    for j, slot in enumerate(slots):
        src = major if j < n_major else minor
        words[slot] = src[int(rng.integers(0, len(src)))]
    return tuple(words) + (EOS,), label


def generate_synthetic(cfg: SyntheticConfig | None = None, **overrides) -> Dataset:
    """Planted-keyword sentiment corpus.

    Every sentence has 8-20 words plus ``<eos>``, one to ``max_major``
    keywords of its class and ``margin`` fewer from the other class, so the
    label is the class with more planted keywords.  Splits never share a token sequence.
    """
    cfg = cfg or SyntheticConfig()
    for k, v in overrides.items():
        setattr(cfg, k, v)
    for name in ("n_train", "n_unlabeled", "n_dev", "n_test"):
        if getattr(cfg, name) < 1:
            raise ValueError(f"{name} must be at least 1")
    pos, neg, filler = keyword_sets(cfg)
    rng = np.random.default_rng(cfg.seed)
    seen: set[tuple[str, ...]] = set()

    def draw(n, labeled=True):
        out = []
        while len(out) < n:
            tokens, label = _sentence(rng, cfg, pos, neg, filler)
            if tokens in seen:
                continue
            seen.add(tokens)
            out.append(ClassificationRecord(tokens, label if labeled else None))
        return out

    return Dataset(
        train=draw(cfg.n_train),
        unlabeled=draw(cfg.n_unlabeled, labeled=False),
        dev=draw(cfg.n_dev),
        test=draw(cfg.n_test),
    )
