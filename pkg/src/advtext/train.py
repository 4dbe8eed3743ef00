"""Joint adversarial objectives, Adam with per-step decay, early stopping."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import perturb
from .autodiff import Tape, Tensor
from .models import Batch, ModelParams, forward, kl_loss, nll_loss, sample_dropout_masks

log = logging.getLogger(__name__)

SUPERVISED = ("random", "advt", "iadvt", "iadvt-rand", "iadvt-best")
SEMI_SUPERVISED = ("vat", "ivat", "random-vat")
METHODS = ("baseline",) + SUPERVISED + SEMI_SUPERVISED

# embedding dim, LSTM state size, FFNN hidden size
PRESETS = {
    "sec": (256, 1024, 30),
    "cac": (256, 1024, 128),
    "ged": (300, 200, 50),
}


def default_epsilon(method: str) -> float:
    return 15.0 if method.startswith("i") else 5.0


@dataclass
class TrainConfig:
    method: str = "baseline"
    task: str = "classify"
    preset: str | None = None
    emb_dim: int | None = None
    hidden: int | None = None
    ffnn_hidden: int | None = None
    epsilon: float | None = None
    lam: float = 1.0
    k_neighbors: int = 10
    xi: float | None = None
    batch_size: int = 32
    learning_rate: float = 0.001
    decay_rate: float = 0.9998
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout_rate: float = 0.5
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    neighbor_refresh_interval: int = 1
    neighbor_metric: str = "euclidean"
    perturb_before_dropout: bool = False
    clip_norm: float | None = None
    min_freq: int = 1
    max_vocab: int | None = None
    normalize_embeddings: bool = False

    def __post_init__(self):
        self.resolve()

    def resolve(self) -> "TrainConfig":
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.task not in ("classify", "tag"):
            raise ValueError(f"unknown task {self.task!r}")
        preset = self.preset or ("ged" if self.task == "tag" else "sec")
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}")
        self.preset = preset
        d, h, f = PRESETS[preset]
        self.emb_dim = self.emb_dim or d
        self.hidden = self.hidden or h
        self.ffnn_hidden = self.ffnn_hidden or f
        if self.epsilon is None:
            self.epsilon = default_epsilon(self.method)
        if self.xi is None:
            self.xi = 0.1 * self.epsilon
        if self.method != "baseline" and self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be at least 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.batch_size < 1 or self.neighbor_refresh_interval < 1:
            raise ValueError("batch_size and neighbor_refresh_interval must be positive")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)


class Adam:
    """Adam; the learning rate is multiplied by ``decay_rate`` after each step."""

    def __init__(self, params: ModelParams, lr=0.001, decay_rate=1.0, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None):
        self.lr = lr
        self.decay_rate = decay_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.tensors.items()}

    @classmethod
    def from_config(cls, params: ModelParams, config: TrainConfig) -> "Adam":
        return cls(params, config.learning_rate, config.decay_rate, config.beta1, config.beta2,
                   config.adam_eps, config.clip_norm)

    def step(self, params: ModelParams) -> None:
        grads = {k: (np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in params.tensors.items()}
        if self.clip_norm is not None:
            total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > self.clip_norm:
                grads = {k: g * (self.clip_norm / total) for k, g in grads.items()}
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, tensor in params.tensors.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            tensor.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        self.lr *= self.decay_rate


@dataclass
class StepContext:
    """Per-run state the objective needs beyond the parameters."""

    rng: np.random.Generator
    step: int = 0
    search_matrix: np.ndarray | None = None

    def refresh(self, params: ModelParams, interval: int) -> None:
        if self.search_matrix is None or self.step % interval == 0:
            self.search_matrix = params.embedding.data.copy()


def concat_batches(a: Batch, b: Batch, pad_id: int = 0) -> Batch:
    """Stack two batches row-wise, padding to the longer one; labels dropped."""
    T = max(a.length, b.length)

    def pad(x, fill):
        out = np.full((x.shape[0], T), fill, dtype=x.dtype)
        out[:, : x.shape[1]] = x
        return out

    ids = np.concatenate([pad(a.ids, pad_id), pad(b.ids, pad_id)])
    mask = np.concatenate([pad(a.mask, 0.0), pad(b.mask, 0.0)])
    return Batch(ids, mask, None)


def _fwd(config: TrainConfig, masks) -> dict:
    return {
        "train": True,
        "dropout_rate": config.dropout_rate,
        "masks": masks,
        "perturb_before_dropout": config.perturb_before_dropout,
    }


def make_perturbation(
    scheme: str, params: ModelParams, batch: Batch, config: TrainConfig, ctx: StepContext, fwd: dict, clean=None
) -> perturb.Perturbation:
    return perturb.generate(
        scheme,
        params,
        batch,
        config.epsilon,
        ctx.rng,
        xi=config.xi,
        k=config.k_neighbors,
        fwd=fwd,
        clean=clean,
        search_matrix=ctx.search_matrix,
        metric=config.neighbor_metric,
    )


def joint_objective(
    tape: Tape,
    batch: Batch,
    params: ModelParams,
    config: TrainConfig,
    ctx: StepContext,
    unlabeled: Batch | None = None,
) -> tuple[Tensor, dict]:
    """``J(batch) + lambda * J_method``.

    The perturbation is built on its own tape from the current parameter
    values and enters this tape as a constant, so the parameter gradient never
    differentiates through its construction.
    """
    method = config.method
    if batch.labels is None:
        raise ValueError(f"{method} needs a labeled batch for the supervised term")
    rng = ctx.rng
    masks = None
    if config.dropout_rate > 0:
        masks = sample_dropout_masks(rng, batch, params.emb_dim, config.dropout_rate)
    fwd = _fwd(config, masks)
    clean = forward(tape, params, batch, **fwd)
    J = nll_loss(tape, clean, batch.labels)
    parts = {"loss": float(J.data)}
    if method == "baseline" or config.lam == 0.0:
        parts["adv_loss"] = 0.0
        return J, parts

    if method in SUPERVISED:
        scheme = method
        p = make_perturbation(scheme, params, batch, config, ctx, fwd)
        adv = forward(tape, params, batch, perturbation=p.r, **fwd)
        J_adv = nll_loss(tape, adv, batch.labels)
    else:
        if unlabeled is None:
            kl_batch = Batch(batch.ids, batch.mask, None)
        else:
            kl_batch = concat_batches(batch, unlabeled)
        if unlabeled is None:
            kl_fwd = fwd
        else:
            kl_masks = None
            if config.dropout_rate > 0:
                extra = sample_dropout_masks(rng, unlabeled, params.emb_dim, config.dropout_rate)
                kl_masks = np.zeros(kl_batch.ids.shape + (params.emb_dim,))
                kl_masks[: batch.size, : batch.length] = masks
                kl_masks[batch.size :, : unlabeled.length] = extra
            kl_fwd = _fwd(config, kl_masks)
        reference = perturb.clean_trace(params, kl_batch, kl_fwd)
        scheme = {"vat": "vat", "ivat": "ivat", "random-vat": "random"}[method]
        p = make_perturbation(scheme, params, kl_batch, config, ctx, kl_fwd, clean=reference)
        adv = forward(tape, params, kl_batch, perturbation=p.r, **kl_fwd)
        J_adv = kl_loss(tape, reference, adv)
    parts["adv_loss"] = float(J_adv.data)
    return tape.add(J, tape.scale(J_adv, config.lam)), parts


@dataclass
class EncodedData:
    """Integer-encoded splits ready for batching."""

    train_ids: list[list[int]]
    train_labels: list
    unlabeled_ids: list[list[int]] = field(default_factory=list)
    dev_ids: list[list[int]] = field(default_factory=list)
    dev_labels: list = field(default_factory=list)
    pad_id: int = 0


class TrainState:
    def __init__(self, params: ModelParams, config: TrainConfig):
        self.config = config
        self.optimizer = Adam.from_config(params, config)
        self.ctx = StepContext(np.random.default_rng(config.seed + 1))
        self.unlabeled_order: np.ndarray | None = None
        self.unlabeled_pos = 0


def _next_unlabeled(state: TrainState, data: EncodedData, n: int) -> list[list[int]]:
    rng = state.ctx.rng
    out = []
    while len(out) < n:
        if state.unlabeled_order is None or state.unlabeled_pos >= len(state.unlabeled_order):
            state.unlabeled_order = rng.permutation(len(data.unlabeled_ids))
            state.unlabeled_pos = 0
        out.append(data.unlabeled_ids[state.unlabeled_order[state.unlabeled_pos]])
        state.unlabeled_pos += 1
    return out


def train_epoch(data: EncodedData, params: ModelParams, state: TrainState) -> dict:
    """One shuffled pass over the labeled data, one Adam step per batch."""
    config = state.config
    n = len(data.train_ids)
    if n == 0:
        raise ValueError("empty training set")
    ctx = state.ctx
    order = ctx.rng.permutation(n)
    tot_loss = tot_adv = 0.0
    steps = 0
    semi = config.method in SEMI_SUPERVISED and len(data.unlabeled_ids) > 0
    for start in range(0, n, config.batch_size):
        rows = order[start : start + config.batch_size]
        batch = Batch.from_sequences(
            [data.train_ids[i] for i in rows], [data.train_labels[i] for i in rows], data.pad_id
        )
        unlabeled = None
        if semi:
            unlabeled = Batch.from_sequences(_next_unlabeled(state, data, len(rows)), None, data.pad_id)
        ctx.refresh(params, config.neighbor_refresh_interval)
        params.zero_grad()
        tape = Tape()
        total, parts = joint_objective(tape, batch, params, config, ctx, unlabeled)
        tape.backward(total)
        tape.clear()
        state.optimizer.step(params)
        ctx.step += 1
        steps += 1
        tot_loss += parts["loss"]
        tot_adv += parts["adv_loss"]
    return {
        "steps": ctx.step,
        "lr": state.optimizer.lr,
        "loss": tot_loss / steps,
        "adv_loss": tot_adv / steps,
    }


def predict(params: ModelParams, seqs: Sequence[Sequence[int]], batch_size: int = 64, pad_id: int = 0):
    """Argmax predictions in eval mode (list of ints, or list of lists for tagging)."""
    out = []
    for start in range(0, len(seqs), batch_size):
        chunk = seqs[start : start + batch_size]
        batch = Batch.from_sequences(chunk, None, pad_id)
        trace = perturb.clean_trace(params, batch)
        probs = trace.probs
        if params.task == "classify":
            out.extend(int(i) for i in probs.argmax(axis=1))
        else:
            pred = probs.argmax(axis=2)
            out.extend([int(x) for x in pred[i, : len(s)]] for i, s in enumerate(chunk))
    return out


def dev_metric(params: ModelParams, seqs, labels, pad_id: int = 0) -> float:
    """Error rate (classification, lower is better) or F0.5 (tagging, higher is better)."""
    from .interpret import error_rate, f_half_score

    preds = predict(params, seqs, pad_id=pad_id)
    if params.task == "classify":
        return error_rate(preds, labels)
    flat_p = [x for row in preds for x in row]
    flat_g = [x for row in labels for x in row]
    return f_half_score(flat_p, flat_g)


def early_stop(history: Sequence[float], patience: int, higher_is_better: bool = False) -> tuple[bool, int]:
    """(stop?, index of best entry).  Ties keep the earliest best."""
    if not history:
        raise ValueError("empty history")
    best = 0
    for i, v in enumerate(history):
        if (v > history[best]) if higher_is_better else (v < history[best]):
            best = i
    return len(history) - 1 - best >= patience, best


@dataclass
class FitResult:
    params: ModelParams
    history: list[float]
    best_epoch: int
    log_lines: list[str]


LOG_HEADER = "epoch\tsteps\tlr\ttrain_loss\tadv_loss\tdev_metric"


def fit(params: ModelParams, data: EncodedData, config: TrainConfig, log_stream=None) -> FitResult:
    """Train with per-epoch dev evaluation and early stopping; returns the best params."""
    state = TrainState(params, config)
    higher = params.task == "tag"
    history: list[float] = []
    best = params.copy()
    lines = [LOG_HEADER]
    if log_stream is not None:
        log_stream.write(LOG_HEADER + "\n")
    for epoch in range(1, config.max_epochs + 1):
        m = train_epoch(data, params, state)
        metric = dev_metric(params, data.dev_ids, data.dev_labels, data.pad_id) if data.dev_ids else -m["loss"]
        history.append(metric)
        line = f"{epoch}\t{m['steps']}\t{m['lr']:.8g}\t{m['loss']:.6f}\t{m['adv_loss']:.6f}\t{metric:.6f}"
        lines.append(line)
        if log_stream is not None:
            log_stream.write(line + "\n")
            log_stream.flush()
        log.info(line)
        stop, best_idx = early_stop(history, config.patience, higher or not data.dev_ids)
        if best_idx == len(history) - 1:
            best = params.copy()
        if stop:
            break
    _, best_idx = early_stop(history, config.patience, higher or not data.dev_ids)
    return FitResult(best, history, best_idx, lines)
