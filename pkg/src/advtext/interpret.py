"""Perturbation heatmaps, adversarial text reconstruction, evaluation metrics."""

from __future__ import annotations

import html
import json
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import perturb
from .autodiff import Tape
from .models import Batch, ModelParams, forward, nll_loss
from .vocab import direction_vectors

SCHEMA_VERSION = 1


# -- metrics ------------------------------------------------------------------


def error_rate(predictions: Sequence, gold: Sequence) -> float:
    if len(predictions) != len(gold):
        raise ValueError(f"{len(predictions)} predictions for {len(gold)} gold labels")
    if not gold:
        return 0.0
    return sum(p != g for p, g in zip(predictions, gold)) / len(gold)


def _counts(predicted: Sequence[int], gold: Sequence[int]) -> tuple[int, int, int]:
    """(true positives, predicted positives, gold positives) for label 1."""
    if len(predicted) != len(gold):
        raise ValueError(f"{len(predicted)} predicted tags for {len(gold)} gold tags")
    tp = sum(1 for p, g in zip(predicted, gold) if p == 1 and g == 1)
    return tp, sum(1 for p in predicted if p == 1), sum(1 for g in gold if g == 1)


def precision_recall(predicted: Sequence[int], gold: Sequence[int]) -> tuple[float, float]:
    tp, n_pred, n_gold = _counts(predicted, gold)
    return (tp / n_pred if n_pred else 0.0), (tp / n_gold if n_gold else 0.0)


def f_beta(precision: float, recall: float, beta: float = 0.5) -> float:
    b2 = beta * beta
    denom = b2 * precision + recall
    return (1 + b2) * precision * recall / denom if denom > 0 else 0.0


def f_half_score(predicted: Sequence[int], gold: Sequence[int]) -> float:
    """F0.5 over the error class (label 1) of aligned token tags.

    Computed exactly from the counts, 5tp / (5tp + fn + 4fp), then rounded
    once, so the value does not depend on evaluation order.  0 when nothing is
    right.
    """
    tp, n_pred, n_gold = _counts(predicted, gold)
    if tp == 0:
        return 0.0
    fp, fn = n_pred - tp, n_gold - tp
    return float(Fraction(5 * tp, 5 * tp + fn + 4 * fp))


# -- report types -------------------------------------------------------------


@dataclass
class Candidate:
    word: str
    strength: float
    alpha: float  # signed alpha (restricted schemes) or cosine (advt/vat)


@dataclass
class Cell:
    position: int
    candidates: list[Candidate]
    selected: str | None


@dataclass
class AttackResult:
    tokens: list[str]
    positions: list[int]
    originals: list[str]
    replacements: list[str]
    adversarial_tokens: list[str]
    pred_before: object
    pred_after: object
    loss_before: float
    loss_after: float
    flipped: bool

    def to_json(self) -> dict:
        return {
            "position": self.positions[0] if self.positions else None,
            "replacement": self.replacements[0] if self.replacements else None,
            "substitutions": [
                {"position": p, "original": o, "replacement": r}
                for p, o, r in zip(self.positions, self.originals, self.replacements)
            ],
            "adversarial_tokens": self.adversarial_tokens,
            "pred_before": self.pred_before,
            "pred_after": self.pred_after,
            "loss_before": self.loss_before,
            "loss_after": self.loss_after,
            "flipped": self.flipped,
        }

    @classmethod
    def from_json(cls, tokens: list[str], d: dict) -> "AttackResult":
        subs = d["substitutions"]
        return cls(
            tokens=list(tokens),
            positions=[s["position"] for s in subs],
            originals=[s["original"] for s in subs],
            replacements=[s["replacement"] for s in subs],
            adversarial_tokens=d["adversarial_tokens"],
            pred_before=d["pred_before"],
            pred_after=d["pred_after"],
            loss_before=d["loss_before"],
            loss_after=d["loss_after"],
            flipped=d["flipped"],
        )


@dataclass
class SentenceReport:
    tokens: list[str]
    cells: list[Cell] = field(default_factory=list)
    attack: AttackResult | None = None


@dataclass
class HeatmapReport:
    model_id: str
    method: str
    epsilon: float
    sentences: list[SentenceReport] = field(default_factory=list)

    def to_json(self) -> dict:
        out = []
        for s in self.sentences:
            entry = {"tokens": s.tokens, "cells": [asdict(c) for c in s.cells]}
            if s.attack is not None:
                entry["attack"] = s.attack.to_json()
            out.append(entry)
        return {
            "schema_version": SCHEMA_VERSION,
            "model_id": self.model_id,
            "method": self.method,
            "epsilon": self.epsilon,
            "sentences": out,
        }

    @classmethod
    def from_json(cls, d: dict) -> "HeatmapReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema_version {d.get('schema_version')!r}")
        sentences = []
        for s in d["sentences"]:
            cells = [
                Cell(c["position"], [Candidate(**x) for x in c["candidates"]], c["selected"]) for c in s["cells"]
            ]
            attack = AttackResult.from_json(s["tokens"], s["attack"]) if "attack" in s else None
            sentences.append(SentenceReport(list(s["tokens"]), cells, attack))
        return cls(d["model_id"], d["method"], d["epsilon"], sentences)


# -- ranking ------------------------------------------------------------------


@dataclass
class RankedPosition:
    position: int
    word_ids: list[int]
    scores: list[float]  # signed alpha or cosine
    magnitudes: list[float]  # ranking key before normalization


def rank_alpha(alpha: np.ndarray, neighbors: np.ndarray, mask: np.ndarray | None = None) -> list[RankedPosition]:
    """Rank each position's neighbors by |alpha|, descending; ties by lower word id."""
    T, K = alpha.shape
    out = []
    for t in range(T):
        if mask is not None and not mask[t]:
            continue
        mags = np.abs(alpha[t])
        if not (mags > 0).any():
            out.append(RankedPosition(t, [], [], []))
            continue
        order = sorted((k for k in range(K) if mags[k] > 0), key=lambda k: (-mags[k], int(neighbors[t, k])))
        out.append(
            RankedPosition(
                t,
                [int(neighbors[t, k]) for k in order],
                [float(alpha[t, k]) for k in order],
                [float(mags[k]) for k in order],
            )
        )
    return out


def rank_cosine(
    r: np.ndarray,
    word_ids: np.ndarray,
    matrix: np.ndarray,
    mask: np.ndarray | None = None,
    exclude: Sequence[int] = (0, 1, 2),
) -> list[RankedPosition]:
    """Rank every vocabulary word by cosine(r_t, direction toward it).

    Special ids in ``exclude`` and words coinciding with the current one are skipped.
    """
    out = []
    V = matrix.shape[0]
    for t, wid in enumerate(word_ids):
        if mask is not None and not mask[t]:
            continue
        rn = np.linalg.norm(r[t])
        if rn == 0:
            out.append(RankedPosition(t, [], [], []))
            continue
        dirs = direction_vectors(matrix, np.array(wid), np.arange(V))
        cos = dirs @ (r[t] / rn)
        valid = np.linalg.norm(dirs, axis=1) > 0
        valid[list(exclude)] = False
        order = sorted(np.flatnonzero(valid), key=lambda k: (-cos[k], int(k)))
        out.append(
            RankedPosition(
                t,
                [int(k) for k in order],
                [float(cos[k]) for k in order],
                [max(0.0, float(cos[k]) * rn) for k in order],
            )
        )
    return out


def top_direction_words(
    pert: perturb.Perturbation,
    row: int,
    word_ids: np.ndarray,
    matrix: np.ndarray,
    mask: np.ndarray | None = None,
) -> list[RankedPosition]:
    """Ranked candidate words per position for sentence ``row`` of a batch perturbation."""
    if pert.alpha is not None:
        return rank_alpha(pert.alpha[row], pert.neighbors[row], mask)
    return rank_cosine(pert.r[row], word_ids, matrix, mask)


def heatmap_cells(ranked: list[RankedPosition], id_to_token: Sequence[str], top_m: int = 3) -> list[Cell]:
    """Cells with strengths scaled so the sentence maximum is exactly 1."""
    if top_m < 1:
        raise ValueError("top_m must be at least 1")
    peak = max((rp.magnitudes[0] for rp in ranked if rp.magnitudes), default=0.0)
    cells = []
    for rp in ranked:
        cands = [
            Candidate(id_to_token[w], (m / peak) if peak > 0 else 0.0, s)
            for w, s, m in zip(rp.word_ids[:top_m], rp.scores[:top_m], rp.magnitudes[:top_m])
        ]
        cells.append(Cell(rp.position, cands, cands[0].word if cands else None))
    return cells


# -- adversarial text ---------------------------------------------------------


def _predict_and_loss(params: ModelParams, ids: Sequence[int], label) -> tuple[object, float]:
    batch = Batch.from_sequences([list(ids)], None if label is None else [label])
    tape = Tape()
    trace = forward(tape, params, batch)
    probs = trace.probs[0]
    pred = int(probs.argmax()) if params.task == "classify" else [int(x) for x in probs.argmax(axis=1)]
    target = pred if label is None else label
    loss = float(nll_loss(tape, trace, [target], reduction="sum").data)
    tape.clear()
    return pred, loss


def substitution_order(alpha: np.ndarray, signed: bool = True) -> list[tuple[int, int]]:
    """(position, neighbor slot) pairs, strongest position first.

    A position's strength is its largest alpha component (or largest
    magnitude when ``signed`` is false); positions with no positive
    strength are dropped.  Ties go to the earlier position.
    """
    key = alpha if signed else np.abs(alpha)
    best_k = key.argmax(axis=1)
    strength = key[np.arange(len(key)), best_k]
    order = sorted((t for t in range(len(key)) if strength[t] > 0), key=lambda t: (-strength[t], t))
    return [(t, int(best_k[t])) for t in order]


def reconstruct_adversarial_text(
    params: ModelParams,
    ids: Sequence[int],
    label,
    alpha: np.ndarray,
    neighbors: np.ndarray,
    id_to_token: Sequence[str],
    n_substitutions: int = 1,
    signed: bool = True,
) -> AttackResult:
    """Swap the words at the strongest alpha positions for their strongest neighbors."""
    ids = list(ids)
    tokens = [id_to_token[i] for i in ids]
    pred_before, loss_before = _predict_and_loss(params, ids, label)
    picks = substitution_order(alpha, signed)[: max(n_substitutions, 0)]
    new_ids = list(ids)
    for t, k in picks:
        new_ids[t] = int(neighbors[t, k])
    if picks:
        pred_after, loss_after = _predict_and_loss(params, new_ids, label)
    else:
        pred_after, loss_after = pred_before, loss_before
    return AttackResult(
        tokens=tokens,
        positions=[t for t, _ in picks],
        originals=[tokens[t] for t, _ in picks],
        replacements=[id_to_token[new_ids[t]] for t, _ in picks],
        adversarial_tokens=[id_to_token[i] for i in new_ids],
        pred_before=pred_before,
        pred_after=pred_after,
        loss_before=loss_before,
        loss_after=loss_after,
        flipped=pred_after != pred_before,
    )


def sentence_alpha(
    params: ModelParams,
    ids: Sequence[int],
    label,
    k: int = 10,
    eps: float = 15.0,
    exclude=(0, 1, 2),
    metric: str = "euclidean",
) -> perturb.Perturbation:
    """iAdvT alpha for a single sentence in eval mode."""
    batch = Batch.from_sequences([list(ids)], None if label is None else [label])
    if label is None:
        pred, _ = _predict_and_loss(params, ids, None)
        batch = Batch.from_sequences([list(ids)], [pred])
    nbrs, dirs = perturb.neighbors_and_directions(params, batch, k, exclude, metric=metric)
    return perturb.iadvt_alpha(params, batch, nbrs, dirs, eps)


# -- export -------------------------------------------------------------------


def report_json(report: HeatmapReport) -> str:
    return json.dumps(report.to_json(), indent=2, ensure_ascii=False) + "\n"


def report_html(report: HeatmapReport) -> str:
    esc = html.escape
    parts = [
        "<!DOCTYPE html>",
        '<html><head><meta charset="utf-8"><title>perturbation heatmap</title>',
        "<style>body{font-family:sans-serif;line-height:2}mark{padding:2px 3px;margin:1px;"
        "border-radius:3px}.sub{font-size:70%;color:#036}</style></head><body>",
        f"<h1>{esc(report.method)} &epsilon;={report.epsilon:g}</h1>",
        f"<p>model: {esc(report.model_id)}</p>",
    ]
    for s in report.sentences:
        by_pos = {c.position: c for c in s.cells}
        marks = []
        for t, tok in enumerate(s.tokens):
            cell = by_pos.get(t)
            strength = cell.candidates[0].strength if cell and cell.candidates else 0.0
            title = ", ".join(f"{c.word} {c.strength:.3f}" for c in cell.candidates) if cell else ""
            sub = f' <span class="sub">{esc(cell.selected)}</span>' if cell and cell.selected else ""
            marks.append(
                f'<mark style="background:rgba(30,120,230,{strength:.3f})" title="{esc(title)}">{esc(tok)}{sub}</mark>'
            )
        parts.append("<p>" + " ".join(marks) + "</p>")
        if s.attack is not None:
            a = s.attack
            parts.append(
                f"<p class=\"attack\">adversarial: {esc(' '.join(a.adversarial_tokens))} "
                f"({esc(str(a.pred_before))} &rarr; {esc(str(a.pred_after))})</p>"
            )
    parts.append("</body></html>\n")
    return "\n".join(parts)


def export_report(report: HeatmapReport, path: str | Path, fmt: str = "json") -> Path:
    path = Path(path)
    if fmt == "json":
        text = report_json(report)
    elif fmt == "html":
        text = report_html(report)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path


def load_report(path: str | Path) -> HeatmapReport:
    return HeatmapReport.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
