"""Perturbation generators in word-embedding space.

Every generator works on a padded :class:`~advtext.models.Batch` and treats
each sentence independently: gradients (or alpha gradients) are normalized by
the norm of the whole sentence, i.e. the concatenation over positions, never
per token.  Padded positions always carry zeros.

Unrestricted schemes return an ``(B, T, D)`` field.  The direction-restricted
ones work with alpha weights of shape ``(B, T, K)`` aligned to a neighbor
table of the same shape and unit directions of shape ``(B, T, K, D)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .models import Batch, ForwardTrace, ModelParams, forward, kl_loss, nll_loss
from .vocab import direction_vectors, neighbor_table

VANISH = 1e-12

SCHEMES = ("random", "advt", "vat", "iadvt", "ivat", "iadvt-rand", "iadvt-best")
RESTRICTED = ("iadvt", "ivat", "iadvt-rand", "iadvt-best")


@dataclass
class Perturbation:
    """Value object for one batch of perturbations.

    ``r`` is the additive field.  Restricted schemes also carry ``alpha``,
    ``neighbors`` and ``directions``.
    """

    scheme: str
    r: np.ndarray
    alpha: np.ndarray | None = None
    neighbors: np.ndarray | None = None
    directions: np.ndarray | None = None


def sentence_normalize(g: np.ndarray, eps: float, mask: np.ndarray) -> np.ndarray:
    """Scale each sentence's (masked) array to L2 norm ``eps``.

    ``g`` is ``(B, T, ...)``.  Sentences whose norm falls below 1e-12 come
    back as zeros.
    """
    g = g * mask.reshape(mask.shape + (1,) * (g.ndim - 2))
    norms = np.sqrt((g.reshape(g.shape[0], -1) ** 2).sum(axis=1))
    scale = np.divide(eps, norms, out=np.zeros_like(norms), where=norms >= VANISH)
    return g * scale.reshape((-1,) + (1,) * (g.ndim - 1))


def sentence_norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt((x.reshape(x.shape[0], -1) ** 2).sum(axis=1))


def neighbors_and_directions(
    params: ModelParams,
    batch: Batch,
    k: int,
    exclude=None,
    search_matrix: np.ndarray | None = None,
    metric: str = "euclidean",
) -> tuple[np.ndarray, np.ndarray]:
    """k nearest neighbors of every token and the unit directions toward them.

    ``exclude`` defaults to ids 0-2 (PAD, UNK, EOS).  ``search_matrix`` lets
    the caller search a stale snapshot while directions use current rows.
    """
    if exclude is None:
        exclude = (0, 1, 2)
    E = params.embedding.data
    nbrs = neighbor_table(E if search_matrix is None else search_matrix, batch.ids, k, exclude, metric)
    return nbrs, direction_vectors(E, batch.ids, nbrs)


def alpha_to_perturbation(alpha: np.ndarray, directions: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Per-position weighted sum of direction vectors."""
    if alpha.shape != directions.shape[:-1]:
        raise ValueError(f"alpha {alpha.shape} does not align with directions {directions.shape}")
    r = np.einsum("btk,btkd->btd", alpha, directions)
    if mask is not None:
        r *= mask[:, :, None]
    return r


def _input_gradient(params: ModelParams, batch: Batch, loss_fn, r: np.ndarray | None, fwd: dict):
    tape = Tape()
    trace = forward(tape, params, batch, perturbation=r, **fwd)
    loss = loss_fn(tape, trace)
    if loss.requires_grad:
        tape.backward(loss, into_leaves=False)
    grads = trace.input_grads()
    tape.clear()
    return grads * batch.mask[:, :, None]


def _require_labels(batch: Batch, scheme: str) -> None:
    if batch.labels is None:
        raise ValueError(f"{scheme} needs labeled examples")


def loss_gradient(params: ModelParams, batch: Batch, fwd: dict | None = None) -> np.ndarray:
    """d(sum of per-sentence NLL)/d(embedded input), ``(B, T, D)``."""
    _require_labels(batch, "advt")
    return _input_gradient(
        params, batch, lambda tape, tr: nll_loss(tape, tr, batch.labels, reduction="sum"), None, fwd or {}
    )


def advt_perturb(params: ModelParams, batch: Batch, eps: float, fwd: dict | None = None) -> Perturbation:
    """Linearized worst-case field: ``eps * g / ||g||`` per sentence."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    g = loss_gradient(params, batch, fwd)
    return Perturbation("advt", sentence_normalize(g, eps, batch.mask))


def alpha_gradient(
    params: ModelParams, batch: Batch, directions: np.ndarray, fwd: dict | None = None
) -> np.ndarray:
    """d(loss)/d(alpha) at alpha = 0: embedding gradient dotted with directions."""
    g = loss_gradient(params, batch, fwd)
    return np.einsum("btd,btkd->btk", g, directions)


def iadvt_alpha(
    params: ModelParams,
    batch: Batch,
    neighbors: np.ndarray | None,
    directions: np.ndarray | None,
    eps: float,
    fwd: dict | None = None,
) -> Perturbation:
    if neighbors is None or directions is None:
        raise ValueError("iadvt needs a neighbor table and direction vectors")
    if eps <= 0:
        raise ValueError("eps must be positive")
    alpha = sentence_normalize(alpha_gradient(params, batch, directions, fwd), eps, batch.mask)
    return Perturbation("iadvt", alpha_to_perturbation(alpha, directions, batch.mask), alpha, neighbors, directions)


def clean_trace(params: ModelParams, batch: Batch, fwd: dict | None = None) -> ForwardTrace:
    tape = Tape()
    trace = forward(tape, params, batch, **(fwd or {}))
    tape.clear()
    return trace


def kl_gradient(
    params: ModelParams, batch: Batch, r0: np.ndarray, clean: ForwardTrace, fwd: dict | None = None
) -> np.ndarray:
    """d KL(p_clean || p(. | x + r)) / d(x + r) evaluated at ``r0``."""
    return _input_gradient(
        params, batch, lambda tape, tr: kl_loss(tape, clean, tr, reduction="sum"), r0, fwd or {}
    )


def vat_perturb(
    params: ModelParams,
    batch: Batch,
    eps: float,
    xi: float,
    rng: np.random.Generator,
    fwd: dict | None = None,
    clean: ForwardTrace | None = None,
) -> Perturbation:
    """One random-start step: gradient of KL at a random field of norm ``xi``,
    rescaled to ``eps``.  Labels are ignored."""
    if eps <= 0 or xi <= 0:
        raise ValueError("eps and xi must be positive")
    if clean is None:
        clean = clean_trace(params, batch, fwd)
    d = rng.standard_normal(batch.ids.shape + (params.emb_dim,))
    r0 = sentence_normalize(d, xi, batch.mask)
    g = kl_gradient(params, batch, r0, clean, fwd)
    return Perturbation("vat", sentence_normalize(g, eps, batch.mask))


def ivat_alpha(
    params: ModelParams,
    batch: Batch,
    neighbors: np.ndarray | None,
    directions: np.ndarray | None,
    eps: float,
    xi: float,
    rng: np.random.Generator,
    fwd: dict | None = None,
    clean: ForwardTrace | None = None,
) -> Perturbation:
    """Alpha gradient of KL taken at a random alpha of norm ``xi``."""
    if neighbors is None or directions is None:
        raise ValueError("ivat needs a neighbor table and direction vectors")
    if eps <= 0 or xi <= 0:
        raise ValueError("eps and xi must be positive")
    if clean is None:
        clean = clean_trace(params, batch, fwd)
    a0 = sentence_normalize(rng.standard_normal(neighbors.shape), xi, batch.mask)
    g = kl_gradient(params, batch, alpha_to_perturbation(a0, directions, batch.mask), clean, fwd)
    alpha = sentence_normalize(np.einsum("btd,btkd->btk", g, directions), eps, batch.mask)
    return Perturbation("ivat", alpha_to_perturbation(alpha, directions, batch.mask), alpha, neighbors, directions)


def random_perturb(batch: Batch, dim: int, eps: float, rng: np.random.Generator) -> Perturbation:
    """Isotropic Gaussian field rescaled to ``eps`` per sentence."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = rng.standard_normal(batch.ids.shape + (dim,))
    return Perturbation("random", sentence_normalize(d, eps, batch.mask))


def iadvt_rand(
    batch: Batch,
    neighbors: np.ndarray,
    directions: np.ndarray,
    eps: float,
    rng: np.random.Generator,
) -> Perturbation:
    """One uniformly chosen neighbor direction per position."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    B, T, K = neighbors.shape
    alpha = np.zeros((B, T, K))
    if K:
        pick = rng.integers(0, K, size=(B, T))
        np.put_along_axis(alpha, pick[..., None], 1.0, axis=2)
    alpha = sentence_normalize(alpha, eps, batch.mask)
    return Perturbation(
        "iadvt-rand", alpha_to_perturbation(alpha, directions, batch.mask), alpha, neighbors, directions
    )


def best_one_hot(raw: np.ndarray) -> np.ndarray:
    """Keep, per position, only the alpha component of largest magnitude."""
    B, T, K = raw.shape
    out = np.zeros_like(raw)
    if K:
        pick = np.argmax(np.abs(raw), axis=2)[..., None]
        np.put_along_axis(out, pick, np.take_along_axis(raw, pick, axis=2), axis=2)
    return out


def iadvt_best(
    params: ModelParams,
    batch: Batch,
    neighbors: np.ndarray,
    directions: np.ndarray,
    eps: float,
    fwd: dict | None = None,
) -> Perturbation:
    """Single best direction per position, signed so it raises the loss."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    raw = alpha_gradient(params, batch, directions, fwd)
    alpha = sentence_normalize(best_one_hot(raw), eps, batch.mask)
    return Perturbation(
        "iadvt-best", alpha_to_perturbation(alpha, directions, batch.mask), alpha, neighbors, directions
    )


def generate(
    scheme: str,
    params: ModelParams,
    batch: Batch,
    eps: float,
    rng: np.random.Generator,
    xi: float | None = None,
    k: int = 10,
    fwd: dict | None = None,
    clean: ForwardTrace | None = None,
    neighbors: np.ndarray | None = None,
    search_matrix: np.ndarray | None = None,
    metric: str = "euclidean",
) -> Perturbation:
    """Dispatch on scheme name; computes neighbors when a restricted scheme needs them."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown perturbation scheme {scheme!r}")
    if xi is None:
        xi = 0.1 * eps
    directions = None
    if scheme in RESTRICTED:
        if neighbors is None:
            neighbors, directions = neighbors_and_directions(params, batch, k, None, search_matrix, metric)
        else:
            directions = direction_vectors(params.embedding.data, batch.ids, neighbors)
    if scheme == "random":
        return random_perturb(batch, params.emb_dim, eps, rng)
    if scheme == "advt":
        return advt_perturb(params, batch, eps, fwd)
    if scheme == "vat":
        return vat_perturb(params, batch, eps, xi, rng, fwd, clean)
    if scheme == "iadvt":
        return iadvt_alpha(params, batch, neighbors, directions, eps, fwd)
    if scheme == "ivat":
        return ivat_alpha(params, batch, neighbors, directions, eps, xi, rng, fwd, clean)
    if scheme == "iadvt-rand":
        return iadvt_rand(batch, neighbors, directions, eps, rng)
    return iadvt_best(params, batch, neighbors, directions, eps, fwd)
