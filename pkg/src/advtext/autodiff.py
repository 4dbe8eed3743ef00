"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every primitive applied to tensors that require
gradients.  Calling :meth:`Tape.backward` on a scalar result walks the
recorded nodes once in reverse order and accumulates ``grad`` on every
tensor that takes part in the computation, intermediates included, so the
gradient with respect to an embedded input position can be read back after
the pass (see :func:`input_gradients`).

Broadcasting is limited to adding a bias row to a matrix; every other shape
mismatch raises :class:`ShapeError`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class TapeError(RuntimeError):
    """Misuse of a tape: non-scalar loss, foreign tensor, missing backward."""


class Tensor:
    """Dense float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _check_finite(out: np.ndarray, op: str) -> None:
    if not np.isfinite(out).all():
        raise FloatingPointError(f"{op} produced non-finite values")


def _shape_error(op: str, a: Tensor, b: Tensor) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive operations for one forward pass.

    A tape is confined to a single thread.  Distinct tapes may read the same
    parameter tensors concurrently as long as nobody steps the optimizer.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._ran_backward = False

    # -- recording ---------------------------------------------------------

    def _record(self, op: str, value: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
        _check_finite(value, op)
        out = Tensor.__new__(Tensor)
        out.data = value
        out.grad = None
        out.name = None
        out._tape = None
        out.requires_grad = any(t.requires_grad for t in inputs)
        if out.requires_grad:
            out._tape = self
            self.nodes.append(_Node(out, inputs, backward))
        return out

    # -- primitives --------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise _shape_error("matmul", a, b)
        av, bv = a.data, b.data

        def back(g):
            return g @ bv.T, av.T @ g

        return self._record("matmul", av @ bv, (a, b), back)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise sum; ``b`` may also be a bias row matching a's last axis."""
        if a.shape == b.shape:
            return self._record("add", a.data + b.data, (a, b), lambda g: (g, g))
        if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
            return self._record("add", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
        raise _shape_error("add", a, b)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise _shape_error("mul", a, b)
        av, bv = a.data, b.data
        return self._record("mul", av * bv, (a, b), lambda g: (g * bv, g * av))

    def scale(self, a: Tensor, c: float) -> Tensor:
        c = float(c)
        return self._record("scale", a.data * c, (a,), lambda g: (g * c,))

    def sigmoid(self, a: Tensor) -> Tensor:
        # tanh form is overflow-free for large |x|
        s = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
        return self._record("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))

    def tanh(self, a: Tensor) -> Tensor:
        t = np.tanh(a.data)
        return self._record("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))

    def relu(self, a: Tensor) -> Tensor:
        pos = a.data > 0
        return self._record("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))

    def concat(self, a: Tensor, b: Tensor) -> Tensor:
        """Join along the last axis."""
        if a.data.ndim != b.data.ndim or a.shape[:-1] != b.shape[:-1]:
            raise _shape_error("concat", a, b)
        n = a.shape[-1]
        return self._record(
            "concat",
            np.concatenate([a.data, b.data], axis=-1),
            (a, b),
            lambda g: (g[..., :n], g[..., n:]),
        )

    def slice_cols(self, a: Tensor, start: int, stop: int) -> Tensor:
        shape = a.shape

        def back(g):
            full = np.zeros(shape)
            full[..., start:stop] = g
            return (full,)

        return self._record("slice_cols", a.data[..., start:stop].copy(), (a,), back)

    def lstm_cell(
        self, x: Tensor, h: Tensor, c: Tensor, wx: Tensor, wh: Tensor, b: Tensor, keep: np.ndarray | None = None
    ) -> Tensor:
        """Fused LSTM cell; returns ``[h_new | c_new]`` as one ``(B, 2H)`` tensor.

        Gates are laid out ``[i | f | o | candidate]`` along ``z``'s columns.
        Rows with ``keep == 0`` pass ``h`` and ``c`` through unchanged.
        """
        H = h.shape[1]
        if x.data.ndim != 2 or x.shape[1] != wx.shape[0] or wx.shape[1] != 4 * H or wh.shape != (H, 4 * H):
            raise _shape_error("lstm_cell", x, wx)
        if c.shape != h.shape or b.shape != (4 * H,) or x.shape[0] != h.shape[0]:
            raise _shape_error("lstm_cell", h, c)
        xv, hv, cv = x.data, h.data, c.data
        z = xv @ wx.data + hv @ wh.data + b.data
        s = 0.5 * (np.tanh(0.5 * z[:, : 3 * H]) + 1.0)
        i, f, o = s[:, :H], s[:, H : 2 * H], s[:, 2 * H :]
        g = np.tanh(z[:, 3 * H :])
        c_new = f * cv + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        m = np.ones((xv.shape[0], 1)) if keep is None else np.asarray(keep, dtype=float).reshape(-1, 1)
        h_out = m * h_new + (1.0 - m) * hv
        c_out = m * c_new + (1.0 - m) * cv
        wxv, whv = wx.data, wh.data

        def back(grad):
            gh_out, gc_out = grad[:, :H], grad[:, H:]
            gh = m * gh_out
            gc = m * gc_out + gh * o * (1.0 - tc * tc)
            dz = np.concatenate(
                [gc * g * i * (1.0 - i), gc * cv * f * (1.0 - f), gh * tc * o * (1.0 - o), gc * i * (1.0 - g * g)],
                axis=1,
            )
            return (
                dz @ wxv.T,
                dz @ whv.T + (1.0 - m) * gh_out,
                gc * f + (1.0 - m) * gc_out,
                xv.T @ dz,
                hv.T @ dz,
                dz.sum(axis=0),
            )

        return self._record("lstm_cell", np.concatenate([h_out, c_out], axis=1), (x, h, c, wx, wh, b), back)

    def sum(self, a: Tensor) -> Tensor:
        shape = a.shape
        return self._record("sum", np.array(a.data.sum()), (a,), lambda g: (np.full(shape, g),))

    def log_softmax(self, a: Tensor) -> Tensor:
        """Stable log-softmax over the last axis."""
        z = a.data - a.data.max(axis=-1, keepdims=True)
        out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        p = np.exp(out)

        def back(g):
            return (g - p * g.sum(axis=-1, keepdims=True),)

        return self._record("log_softmax", out, (a,), back)

    def dropout(
        self,
        a: Tensor,
        rate: float,
        rng: np.random.Generator | None = None,
        train: bool = True,
        mask: np.ndarray | None = None,
    ) -> Tensor:
        """Inverted dropout.  Identity when ``train`` is false or ``rate`` is 0.

        ``mask`` (already scaled by ``1/(1-rate)``) replays a previous draw.
        """
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        if not train or rate == 0.0:
            return a
        if mask is None:
            if rng is None:
                raise ValueError("dropout in train mode needs an rng or a mask")
            mask = dropout_mask(rng, a.shape, rate)
        elif mask.shape != a.shape:
            raise ShapeError(f"dropout: incompatible shapes {a.shape} and {mask.shape}")
        return self._record("dropout", a.data * mask, (a,), lambda g: (g * mask,))

    def gather(self, table: Tensor, ids: np.ndarray) -> Tensor:
        """Rows of ``table`` at ``ids``; backward scatters into the table."""
        ids = np.asarray(ids, dtype=np.int64)
        n = table.shape[0]
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            raise IndexError(f"gather: id out of range [0, {n})")
        shape = table.shape

        def back(g):
            full = np.zeros(shape)
            np.add.at(full, ids, g)
            return (full,)

        return self._record("gather", table.data[ids], (table,), back)

    # -- reverse pass ------------------------------------------------------

    def backward(self, loss: Tensor, into_leaves: bool = True) -> None:
        """Accumulate d(loss)/d(tensor) into ``grad`` of every tracked tensor.

        With ``into_leaves=False`` only tensors recorded on this tape receive
        gradients; leaves such as model parameters are left untouched.
        """
        if loss.data.size != 1 or loss.data.ndim > 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            out = node.out
            out.grad = g if out.grad is None else out.grad + g
            for inp, gi in zip(node.inputs, node.backward(g)):
                if not inp.requires_grad:
                    continue
                if inp._tape is self:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
                elif into_leaves:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
        self._ran_backward = True

    def clear(self) -> None:
        for node in self.nodes:
            node.out._tape = None
        self.nodes.clear()


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def input_gradients(tape: Tape, loss: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    """Read d(loss)/d(leaf) after :func:`backward` has run on ``tape``.

    A tracked leaf the loss does not depend on gets a zero array.
    """
    if not tape._ran_backward:
        raise TapeError("backward has not been run on this tape")
    out = []
    for leaf in leaves:
        if not leaf.requires_grad:
            raise TapeError("leaf was not marked requires_grad before the forward pass")
        out.append(np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy())
    return out


def dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    """Keep-mask scaled by ``1/(1-rate)``."""
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)
