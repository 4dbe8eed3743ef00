"""LSTM text classifier, bidirectional LSTM tagger, NLL and KL losses.

Everything runs on padded mini-batches: ``ids`` is ``(B, T)`` and ``mask``
marks real tokens with 1.  Recurrent state is carried unchanged through
padded steps, so the classifier reads the state at the last real token and
the backward tagger LSTM starts from a zero state at each sentence's end.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import xlogy

from .autodiff import Tape, Tensor, constant, dropout_mask
from .vocab import init_embedding

TASKS = ("classify", "tag")


@dataclass
class Batch:
    ids: np.ndarray  # (B, T) int
    mask: np.ndarray  # (B, T) float, 1 = real token
    labels: np.ndarray | None = None  # (B,) classify, (B, T) tag

    @classmethod
    def from_sequences(
        cls,
        seqs: Sequence[Sequence[int]],
        labels=None,
        pad_id: int = 0,
    ) -> "Batch":
        if not seqs or any(len(s) == 0 for s in seqs):
            raise ValueError("every sequence must be non-empty")
        T = max(len(s) for s in seqs)
        ids = np.full((len(seqs), T), pad_id, dtype=np.int64)
        mask = np.zeros((len(seqs), T))
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
            mask[i, : len(s)] = 1.0
        lab = None
        if labels is not None:
            first = labels[0]
            if np.ndim(first) == 0:
                lab = np.asarray(labels, dtype=np.int64)
            else:
                lab = np.zeros((len(seqs), T), dtype=np.int64)
                for i, row in enumerate(labels):
                    if len(row) != len(seqs[i]):
                        raise ValueError(f"label length {len(row)} != sequence length {len(seqs[i])}")
                    lab[i, : len(row)] = row
        return cls(ids, mask, lab)

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @property
    def length(self) -> int:
        return self.ids.shape[1]

    def select(self, rows) -> "Batch":
        """Sub-batch of the given rows, trimmed to their longest sequence."""
        ids, mask = self.ids[rows], self.mask[rows]
        T = int(mask.sum(axis=1).max())
        lab = None
        if self.labels is not None:
            lab = self.labels[rows]
            if lab.ndim == 2:
                lab = lab[:, :T]
        return Batch(ids[:, :T], mask[:, :T], lab)


@dataclass
class ModelParams:
    """All learnable weights of a classifier or tagger.

    Tensor names: ``embedding``; ``lstm_f.{wx,wh,b}`` (and ``lstm_b.*`` for
    tagging); ``ffnn.{w1,b1,w2,b2}``.  Dict order is the serialization order.
    """

    task: str
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def embedding(self) -> Tensor:
        return self.tensors["embedding"]

    @property
    def emb_dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def hidden(self) -> int:
        return self.tensors["lstm_f.wh"].shape[0]

    @property
    def n_classes(self) -> int:
        return self.tensors["ffnn.w2"].shape[1]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.task,
            {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.tensors.items()},
        )

    def check(self) -> None:
        D, H = self.emb_dim, self.hidden
        n_dir = 2 if self.task == "tag" else 1
        expect = {
            "lstm_f.wx": (D, 4 * H),
            "lstm_f.wh": (H, 4 * H),
            "lstm_f.b": (4 * H,),
            "ffnn.w1": (n_dir * H, self["ffnn.w1"].shape[1]),
        }
        if self.task == "tag":
            expect.update({"lstm_b.wx": (D, 4 * H), "lstm_b.wh": (H, 4 * H), "lstm_b.b": (4 * H,)})
        for name, shape in expect.items():
            if self[name].shape != shape:
                raise ValueError(f"{name} has shape {self[name].shape}, expected {shape}")
        F = self["ffnn.w1"].shape[1]
        if self["ffnn.b1"].shape != (F,) or self["ffnn.w2"].shape[0] != F:
            raise ValueError("ffnn shapes are inconsistent")
        for name, t in self.tensors.items():
            if not np.isfinite(t.data).all():
                raise ValueError(f"{name} holds non-finite values")


def init_params(
    task: str,
    vocab_size: int,
    emb_dim: int,
    hidden: int,
    ffnn_hidden: int,
    n_classes: int,
    rng: np.random.Generator,
    forget_bias: float = 1.0,
) -> ModelParams:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")

    def uniform(*shape):
        return rng.uniform(-0.1, 0.1, size=shape)

    def lstm_bias():
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = forget_bias
        return b

    arrays = {"embedding": init_embedding(vocab_size, emb_dim, rng).data}
    directions = ["lstm_f"] + (["lstm_b"] if task == "tag" else [])
    for d in directions:
        arrays[f"{d}.wx"] = uniform(emb_dim, 4 * hidden)
        arrays[f"{d}.wh"] = uniform(hidden, 4 * hidden)
        arrays[f"{d}.b"] = lstm_bias()
    arrays["ffnn.w1"] = uniform(len(directions) * hidden, ffnn_hidden)
    arrays["ffnn.b1"] = np.zeros(ffnn_hidden)
    arrays["ffnn.w2"] = uniform(ffnn_hidden, n_classes)
    arrays["ffnn.b2"] = np.zeros(n_classes)
    params = ModelParams(task, {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()})
    params.check()
    return params


@dataclass
class ForwardTrace:
    """Result of one forward pass.

    ``inputs[t]`` is the ``(B, D)`` tensor where position ``t``'s perturbation
    enters; after backward its ``grad`` is the loss gradient at that point.
    ``log_probs`` holds one ``(B, C)`` tensor for classification and one per
    position for tagging.
    """

    task: str
    inputs: list[Tensor]
    log_probs: list[Tensor]
    mask: np.ndarray
    hidden: list[Tensor] = field(default_factory=list)

    @property
    def probs(self) -> np.ndarray:
        """``(B, C)`` for classification, ``(B, T, C)`` for tagging."""
        if self.task == "classify":
            return np.exp(self.log_probs[0].data)
        return np.stack([np.exp(lp.data) for lp in self.log_probs], axis=1)

    def input_grads(self) -> np.ndarray:
        """Stacked input gradients ``(B, T, D)``; zeros where none flowed."""
        return np.stack(
            [np.zeros_like(x.data) if x.grad is None else x.grad for x in self.inputs], axis=1
        )


def lstm_step(
    tape: Tape, params: ModelParams, prefix: str, x: Tensor, h: Tensor, c: Tensor, keep: np.ndarray | None = None
):
    """One LSTM cell: sigmoid input/forget/output gates, tanh candidate.

    Rows where ``keep`` is 0 (padding) carry ``h`` and ``c`` over unchanged.
    """
    H = h.shape[-1]
    if keep is not None and keep.all():
        keep = None
    hc = tape.lstm_cell(x, h, c, params[f"{prefix}.wx"], params[f"{prefix}.wh"], params[f"{prefix}.b"], keep)
    return tape.slice_cols(hc, 0, H), tape.slice_cols(hc, H, 2 * H)


def _run_lstm(tape: Tape, params: ModelParams, prefix: str, xs: list[Tensor], mask: np.ndarray, reverse: bool):
    B = mask.shape[0]
    H = params.hidden
    h = constant(np.zeros((B, H)))
    c = constant(np.zeros((B, H)))
    states: list[Tensor | None] = [None] * len(xs)
    order = range(len(xs) - 1, -1, -1) if reverse else range(len(xs))
    for t in order:
        h, c = lstm_step(tape, params, prefix, xs[t], h, c, mask[:, t])
        states[t] = h
    return states, h


def _ffnn(tape: Tape, params: ModelParams, h: Tensor) -> Tensor:
    a = tape.relu(tape.add(tape.matmul(h, params["ffnn.w1"]), params["ffnn.b1"]))
    return tape.add(tape.matmul(a, params["ffnn.w2"]), params["ffnn.b2"])


def embed(
    tape: Tape,
    params: ModelParams,
    batch: Batch,
    perturbation: np.ndarray | None = None,
    train: bool = False,
    dropout_rate: float = 0.0,
    masks: np.ndarray | None = None,
    perturb_before_dropout: bool = False,
) -> tuple[list[Tensor], list[Tensor]]:
    """Look up, drop out and perturb the embedded inputs.

    Returns ``(inputs, feed)``: ``inputs[t]`` is where the perturbation is
    added, ``feed[t]`` is what the LSTM reads.  ``masks`` is a ``(B, T, D)``
    scaled keep-mask reused across passes of one training step.
    """
    B, T = batch.ids.shape
    if T == 0:
        raise ValueError("empty sequence")
    if perturbation is not None and perturbation.shape != (B, T, params.emb_dim):
        raise ValueError(f"perturbation shape {perturbation.shape} != {(B, T, params.emb_dim)}")
    inputs, feed = [], []
    use_dropout = train and dropout_rate > 0.0
    for t in range(T):
        x = tape.gather(params.embedding, batch.ids[:, t])
        if use_dropout and not perturb_before_dropout:
            x = tape.dropout(x, dropout_rate, mask=masks[:, t])
        if perturbation is not None:
            x = tape.add(x, constant(perturbation[:, t]))
        inputs.append(x)
        if use_dropout and perturb_before_dropout:
            x = tape.dropout(x, dropout_rate, mask=masks[:, t])
        feed.append(x)
    return inputs, feed


def forward(
    tape: Tape,
    params: ModelParams,
    batch: Batch,
    perturbation: np.ndarray | None = None,
    train: bool = False,
    dropout_rate: float = 0.0,
    masks: np.ndarray | None = None,
    perturb_before_dropout: bool = False,
) -> ForwardTrace:
    """Dispatch to :func:`classify` or :func:`tag` by ``params.task``."""
    fn = classify if params.task == "classify" else tag
    return fn(tape, params, batch, perturbation, train, dropout_rate, masks, perturb_before_dropout)


def classify(
    tape: Tape,
    params: ModelParams,
    batch: Batch,
    perturbation: np.ndarray | None = None,
    train: bool = False,
    dropout_rate: float = 0.0,
    masks: np.ndarray | None = None,
    perturb_before_dropout: bool = False,
) -> ForwardTrace:
    inputs, feed = embed(tape, params, batch, perturbation, train, dropout_rate, masks, perturb_before_dropout)
    _, h_last = _run_lstm(tape, params, "lstm_f", feed, batch.mask, reverse=False)
    logp = tape.log_softmax(_ffnn(tape, params, h_last))
    return ForwardTrace("classify", inputs, [logp], batch.mask, [h_last])


def tag(
    tape: Tape,
    params: ModelParams,
    batch: Batch,
    perturbation: np.ndarray | None = None,
    train: bool = False,
    dropout_rate: float = 0.0,
    masks: np.ndarray | None = None,
    perturb_before_dropout: bool = False,
) -> ForwardTrace:
    inputs, feed = embed(tape, params, batch, perturbation, train, dropout_rate, masks, perturb_before_dropout)
    hf, _ = _run_lstm(tape, params, "lstm_f", feed, batch.mask, reverse=False)
    hb, _ = _run_lstm(tape, params, "lstm_b", feed, batch.mask, reverse=True)
    hidden = [tape.concat(f, b) for f, b in zip(hf, hb)]
    log_probs = [tape.log_softmax(_ffnn(tape, params, h)) for h in hidden]
    return ForwardTrace("tag", inputs, log_probs, batch.mask, hidden)


def sample_dropout_masks(rng: np.random.Generator, batch: Batch, dim: int, rate: float) -> np.ndarray:
    return dropout_mask(rng, batch.ids.shape + (dim,), rate)


def _check_labels(labels: np.ndarray, n_classes: int) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"class ids must lie in [0, {n_classes})")


def nll_loss(tape: Tape, trace: ForwardTrace, labels, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood: per sentence ``-log p(y)``, or for tagging the
    sum over unmasked positions; then averaged (or summed) over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    B = trace.mask.shape[0]
    C = trace.log_probs[0].shape[1]
    _check_labels(labels, C)
    w = -1.0 / B if reduction == "mean" else -1.0
    if trace.task == "classify":
        if labels.shape != (B,):
            raise ValueError(f"expected {B} labels, got shape {labels.shape}")
        onehot = np.zeros((B, C))
        onehot[np.arange(B), labels] = w
        return tape.sum(tape.mul(trace.log_probs[0], constant(onehot)))
    if labels.shape != trace.mask.shape:
        raise ValueError(f"tag labels {labels.shape} do not match mask {trace.mask.shape}")
    total = None
    for t, lp in enumerate(trace.log_probs):
        onehot = np.zeros((B, C))
        onehot[np.arange(B), labels[:, t]] = w * trace.mask[:, t]
        term = tape.sum(tape.mul(lp, constant(onehot)))
        total = term if total is None else tape.add(total, term)
    return total


def kl_loss(tape: Tape, clean: ForwardTrace, perturbed: ForwardTrace, reduction: str = "mean") -> Tensor:
    """KL(p_clean || p_perturbed), with the clean distribution held constant."""
    if len(clean.log_probs) != len(perturbed.log_probs) or clean.mask.shape != perturbed.mask.shape:
        raise ValueError("traces differ in length")
    B = clean.mask.shape[0]
    w = 1.0 / B if reduction == "mean" else 1.0
    total = None
    for t, (lp_c, lp_p) in enumerate(zip(clean.log_probs, perturbed.log_probs)):
        p = np.exp(lp_c.data)
        m = np.ones(B) if clean.task == "classify" else clean.mask[:, t]
        coef = p * (w * m)[:, None]
        entropy_part = float(xlogy(coef, p).sum())
        term = tape.sum(tape.mul(lp_p, constant(-coef)))
        term = tape.add(term, constant(entropy_part))
        total = term if total is None else tape.add(total, term)
    return total
