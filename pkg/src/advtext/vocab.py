"""Vocabulary, embedding matrix helpers, exact neighbor search, direction vectors."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tape, Tensor

log = logging.getLogger(__name__)

PAD, UNK, EOS = "<pad>", "<unk>", "<eos>"
SPECIALS = (PAD, UNK, EOS)


@dataclass
class Vocabulary:
    id_to_token: list[str]
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        missing = [s for s in SPECIALS if s not in self.token_to_id]
        if missing:
            raise ValueError(f"vocabulary lacks special tokens {missing}")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    @property
    def eos_id(self) -> int:
        return self.token_to_id[EOS]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self.token_to_id[s] for s in SPECIALS)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        unk = self.unk_id
        return [self.token_to_id.get(t, unk) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]


def build_vocab(corpus: Iterable[str], min_freq: int = 1, max_size: int | None = None) -> Vocabulary:
    """Count tokens and keep the frequent ones, most frequent first.

    Ties keep first-occurrence order.  ``max_size`` bounds the non-special
    entries; PAD, UNK and EOS always occupy ids 0, 1, 2.
    """
    counts: Counter[str] = Counter()
    first_seen: dict[str, int] = {}
    for tok in corpus:
        counts[tok] += 1
        first_seen.setdefault(tok, len(first_seen))
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = [t for t in counts if counts[t] >= min_freq and t not in SPECIALS]
    kept.sort(key=lambda t: (-counts[t], first_seen[t]))
    if max_size is not None:
        kept = kept[:max_size]
    return Vocabulary(list(SPECIALS) + kept)


def init_embedding(n_rows: int, dim: int, rng: np.random.Generator) -> Tensor:
    """Normal(0, 1) rows scaled by 1/sqrt(dim)."""
    if dim <= 0 or n_rows <= 0:
        raise ValueError("embedding needs positive row count and dimension")
    return Tensor(rng.standard_normal((n_rows, dim)) / math.sqrt(dim), requires_grad=True, name="embedding")


def normalize_embedding(matrix: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    """Frequency-weighted zero-mean / unit-variance rescaling of the rows."""
    w = freqs / freqs.sum()
    mean = (w[:, None] * matrix).sum(axis=0)
    var = (w[:, None] * (matrix - mean) ** 2).sum(axis=0)
    return (matrix - mean) / np.sqrt(var + 1e-6)


def lookup(tape: Tape, embedding: Tensor, ids: Sequence[int]) -> list[Tensor]:
    """One gradient-tracked vector per position, gathered from the matrix rows."""
    ids = np.asarray(ids, dtype=np.int64)
    return [tape.gather(embedding, ids[t : t + 1]) for t in range(len(ids))]


@dataclass
class NeighborResult:
    ids: list[int]
    distances: list[float]
    shortfall: bool = False


def _distances(matrix: np.ndarray, query: np.ndarray, metric: str) -> np.ndarray:
    """Ranking key per row: squared Euclidean distance, or cosine distance."""
    if metric == "euclidean":
        diff = matrix - query
        return np.einsum("ij,ij->i", diff, diff)
    if metric == "cosine":
        norms = np.linalg.norm(matrix, axis=1) * np.linalg.norm(query)
        sim = (matrix @ query) / np.where(norms > 0, norms, 1.0)
        return 1.0 - sim
    raise ValueError(f"unknown metric {metric!r}")


def nearest_neighbors(
    embedding: np.ndarray | Tensor,
    word_id: int,
    k: int,
    exclude: Iterable[int] = (),
    metric: str = "euclidean",
) -> NeighborResult:
    """Exact k nearest rows to ``word_id``; ties go to the lower id.

    The query itself is always excluded.  When fewer than ``k`` ids are
    eligible, all of them are returned and ``shortfall`` is set.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    matrix = embedding.data if isinstance(embedding, Tensor) else np.asarray(embedding)
    n = matrix.shape[0]
    if not 0 <= word_id < n:
        raise IndexError(f"word id {word_id} out of range [0, {n})")
    key = _distances(matrix, matrix[word_id], metric)
    eligible = np.ones(n, dtype=bool)
    eligible[word_id] = False
    for i in exclude:
        eligible[i] = False
    cand = np.flatnonzero(eligible)
    order = cand[np.argsort(key[cand], kind="stable")]
    picked = order[:k]
    dist = np.sqrt(key[picked]) if metric == "euclidean" else key[picked]
    return NeighborResult(
        ids=[int(i) for i in picked],
        distances=[float(d) for d in dist],
        shortfall=len(picked) < k,
    )


def neighbor_table(
    matrix: np.ndarray,
    ids: np.ndarray,
    k: int,
    exclude: Iterable[int] = (),
    metric: str = "euclidean",
) -> np.ndarray:
    """Neighbor ids for every entry of ``ids`` (any shape) -> ``ids.shape + (k,)``.

    Same selection rule as :func:`nearest_neighbors`, computed once per
    distinct id.
    """
    matrix = matrix.data if isinstance(matrix, Tensor) else np.asarray(matrix)
    ids = np.asarray(ids, dtype=np.int64)
    if k < 1:
        raise ValueError("k must be at least 1")
    n = matrix.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"word id out of range [0, {n})")
    uniq, inverse = np.unique(ids, return_inverse=True)
    key = np.stack([_distances(matrix, matrix[w], metric) for w in uniq]) if len(uniq) else np.empty((0, n))
    eligible = np.ones((len(uniq), n), dtype=bool)
    eligible[:, list(exclude)] = False
    eligible[np.arange(len(uniq)), uniq] = False
    counts = eligible.sum(axis=1)
    if len(uniq) and counts.min() < k:
        wid = uniq[int(np.argmin(counts))]
        raise ValueError(f"only {int(counts.min())} eligible neighbors for id {wid}, need {k}")
    # stable sort keeps ties in ascending id order; ineligible rows sort last
    key = np.where(eligible, key, np.inf)
    table = np.argsort(key, axis=1, kind="stable")[:, :k]
    return table[inverse.reshape(ids.shape)]


def direction_vectors(matrix: np.ndarray, word_ids: np.ndarray, neighbor_ids: np.ndarray) -> np.ndarray:
    """Unit vectors from each word's row toward each of its neighbors' rows.

    ``word_ids`` has shape S, ``neighbor_ids`` shape S + (k,); the result has
    shape S + (k, D).  Coincident rows give the zero vector.
    """
    matrix = matrix.data if isinstance(matrix, Tensor) else np.asarray(matrix)
    word_ids = np.asarray(word_ids)
    neighbor_ids = np.asarray(neighbor_ids)
    if neighbor_ids.shape[:-1] != word_ids.shape:
        raise ValueError(f"neighbor ids {neighbor_ids.shape} do not align with word ids {word_ids.shape}")
    diff = matrix[neighbor_ids] - matrix[word_ids][..., None, :]
    norm = np.sqrt(np.einsum("...d,...d->...", diff, diff))[..., None]
    return np.divide(diff, norm, out=np.zeros_like(diff), where=norm > 0)


def load_pretrained_vectors(path: str | Path, vocab: Vocabulary, matrix: np.ndarray) -> tuple[int, int]:
    """Overwrite rows of ``matrix`` from a ``token v1 ... vD`` text file.

    Returns (matched, unmatched) token counts.
    """
    dim = matrix.shape[1]
    matched = unmatched = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            token, nums = parts[0], parts[1:]
            if len(nums) != dim:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, found {len(nums)}")
            try:
                row = [float(x) for x in nums]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed number ({exc})") from None
            tid = vocab.token_to_id.get(token)
            if tid is None:
                unmatched += 1
                continue
            matrix[tid] = row
            matched += 1
    if matched + unmatched == 0:
        log.warning("no vectors found in %s", path)
    return matched, unmatched


def export_vectors(path: str | Path, vocab: Vocabulary, matrix: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok, row in zip(vocab.id_to_token, matrix):
            fh.write(tok + " " + " ".join(repr(float(x)) for x in row) + "\n")
