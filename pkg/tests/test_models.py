import math

import numpy as np
import pytest

from advtext.autodiff import Tape, Tensor, constant
from advtext.models import (
    Batch,
    ForwardTrace,
    classify,
    init_params,
    kl_loss,
    lstm_step,
    nll_loss,
    tag,
)

from oracles import central_difference, kl_direct, model_gradient_errors, random_batch, random_model, rel_error


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def np_lstm(x, h, c, wx, wh, b):
    """Plain numpy LSTM cell, gate order i, f, o, candidate."""
    H = h.shape[-1]
    z = x @ wx + h @ wh + b
    i, f, o = sig(z[:, :H]), sig(z[:, H : 2 * H]), sig(z[:, 2 * H : 3 * H])
    g = np.tanh(z[:, 3 * H :])
    c = f * c + i * g
    return o * np.tanh(c), c


def test_lstm_step_zero_everything_gives_zero_state():
    params = init_params("classify", 5, 3, 4, 2, 2, np.random.default_rng(0))
    for name in ("lstm_f.wx", "lstm_f.wh", "lstm_f.b"):
        params[name].data[:] = 0
    tape = Tape()
    h, c = lstm_step(tape, params, "lstm_f", constant(np.zeros((1, 3))), constant(np.zeros((1, 4))), constant(np.zeros((1, 4))))
    np.testing.assert_array_equal(h.data, np.zeros((1, 4)))


def test_saturated_forget_gate_keeps_cell():
    rng = np.random.default_rng(1)
    params = init_params("classify", 5, 3, 4, 2, 2, rng)
    H = 4
    params["lstm_f.b"].data[H : 2 * H] = 50.0
    x, h0, c0 = rng.standard_normal((1, 3)), rng.standard_normal((1, H)), rng.standard_normal((1, H))
    tape = Tape()
    _, c = lstm_step(tape, params, "lstm_f", constant(x), constant(h0), constant(c0))
    z = x @ params["lstm_f.wx"].data + h0 @ params["lstm_f.wh"].data + params["lstm_f.b"].data
    expected = c0 + sig(z[:, :H]) * np.tanh(z[:, 3 * H :])
    np.testing.assert_allclose(c.data, expected, rtol=0, atol=1e-12)


def test_lstm_step_matches_numpy_cell():
    rng = np.random.default_rng(2)
    params = random_model(rng, D=4, H=3)
    x, h0, c0 = rng.standard_normal((2, 4)), rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    tape = Tape()
    h, c = lstm_step(tape, params, "lstm_f", constant(x), constant(h0), constant(c0))
    eh, ec = np_lstm(x, h0, c0, params["lstm_f.wx"].data, params["lstm_f.wh"].data, params["lstm_f.b"].data)
    np.testing.assert_allclose(h.data, eh, rtol=0, atol=1e-14)
    np.testing.assert_allclose(c.data, ec, rtol=0, atol=1e-14)


def test_three_chained_steps_gradient():
    rng = np.random.default_rng(3)
    params = random_model(rng, D=3, H=4)
    xs = [rng.standard_normal((1, 3)) for _ in range(3)]
    wx = params["lstm_f.wx"]

    def run(tape):
        h = constant(np.zeros((1, 4)))
        c = constant(np.zeros((1, 4)))
        for x in xs:
            h, c = lstm_step(tape, params, "lstm_f", constant(x), h, c)
        return tape.sum(tape.mul(h, h))

    params.zero_grad()
    tape = Tape()
    tape.backward(run(tape))
    num = central_difference(lambda: float(run(Tape()).data), wx.data)
    assert rel_error(wx.grad, num) <= 1e-6


def test_zero_output_weights_give_uniform_distribution():
    rng = np.random.default_rng(4)
    params = random_model(rng, C=4)
    params["ffnn.w2"].data[:] = 0
    params["ffnn.b2"].data[:] = 0
    batch = random_batch(rng, 30, 4)
    probs = classify(Tape(), params, batch).probs
    np.testing.assert_allclose(probs, 0.25, rtol=0, atol=1e-15)


def test_probabilities_normalized():
    rng = np.random.default_rng(5)
    for task in ("classify", "tag"):
        params = random_model(rng, task=task, C=5)
        batch = random_batch(rng, 30, 5, task=task, B=6)
        probs = (classify if task == "classify" else tag)(Tape(), params, batch).probs
        assert (probs >= 0).all()
        assert np.abs(probs.sum(axis=-1) - 1.0).max() <= 1e-12


def test_zero_perturbation_is_bit_identical():
    rng = np.random.default_rng(6)
    params = random_model(rng)
    batch = random_batch(rng, 30, 3)
    clean = classify(Tape(), params, batch).log_probs[0].data
    r = np.zeros(batch.ids.shape + (params.emb_dim,))
    pert = classify(Tape(), params, batch, perturbation=r).log_probs[0].data
    assert clean.tobytes() == pert.tobytes()


def test_classifier_reads_last_real_token():
    rng = np.random.default_rng(7)
    params = random_model(rng)
    short = Batch.from_sequences([[4, 5]])
    padded = Batch.from_sequences([[4, 5], [6, 7, 8, 9]])
    a = classify(Tape(), params, short).log_probs[0].data[0]
    b = classify(Tape(), params, padded).log_probs[0].data[0]
    assert a.tobytes() == b.tobytes()


def test_empty_sequence_rejected():
    with pytest.raises(ValueError):
        Batch.from_sequences([[]])


def test_tag_single_step():
    rng = np.random.default_rng(8)
    params = random_model(rng, task="tag", C=2)
    tr = tag(Tape(), params, Batch.from_sequences([[5]]))
    assert tr.probs.shape == (1, 1, 2)
    assert abs(tr.probs.sum() - 1.0) <= 1e-12


def test_backward_lstm_two_step_hand_computation():
    rng = np.random.default_rng(9)
    params = random_model(rng, task="tag", D=3, H=2, C=2)
    E = params.embedding.data
    a, b = 4, 7
    tr = tag(Tape(), params, Batch.from_sequences([[a, b]]))
    w = [params[f"lstm_b.{n}"].data for n in ("wx", "wh", "b")]
    zero = np.zeros((1, 2))
    hb2, cb2 = np_lstm(E[b : b + 1], zero, zero, *w)
    hb1, _ = np_lstm(E[a : a + 1], hb2, cb2, *w)
    np.testing.assert_allclose(tr.hidden[0].data[:, 2:], hb1, rtol=0, atol=1e-14)
    np.testing.assert_allclose(tr.hidden[1].data[:, 2:], hb2, rtol=0, atol=1e-14)
    # reversing the input swaps which position sees the one-step state
    rev = tag(Tape(), params, Batch.from_sequences([[b, a]]))
    hb2r, _ = np_lstm(E[a : a + 1], zero, zero, *w)
    np.testing.assert_allclose(rev.hidden[1].data[:, 2:], hb2r, rtol=0, atol=1e-14)


def _trace(log_probs, mask=None, task="classify"):
    lps = [Tensor(np.asarray(lp, dtype=float)) for lp in log_probs]
    B = lps[0].shape[0]
    m = np.ones((B, len(lps))) if mask is None else np.asarray(mask, dtype=float)
    return ForwardTrace(task, [], lps, m)


def test_nll_uniform_two_classes():
    tr = _trace([[[math.log(0.5), math.log(0.5)]]])
    assert abs(float(nll_loss(Tape(), tr, [1]).data) - math.log(2)) <= 1e-15


def test_nll_certain_prediction_is_zero():
    tape = Tape()
    lp = tape.log_softmax(Tensor([[1000.0, 0.0]]))
    tr = ForwardTrace("classify", [], [lp], np.ones((1, 1)))
    assert float(nll_loss(tape, tr, [0]).data) == 0.0


def test_nll_tagging_uniform():
    lp = [[math.log(0.5), math.log(0.5)]]
    tr = _trace([lp, lp, lp], task="tag")
    loss = float(nll_loss(Tape(), tr, [[0, 1, 0]]).data)
    assert abs(loss - 3 * math.log(2)) <= 1e-14


def test_nll_matches_direct_sum_and_rejects_bad_ids():
    rng = np.random.default_rng(10)
    params = random_model(rng, task="tag", C=3)
    batch = random_batch(rng, 30, 3, task="tag", B=4)
    tr = tag(Tape(), params, batch)
    loss = float(nll_loss(Tape(), tr, batch.labels, reduction="sum").data)
    direct = 0.0
    for b in range(4):
        for t in range(batch.length):
            if batch.mask[b, t]:
                direct -= tr.log_probs[t].data[b, batch.labels[b, t]]
    assert abs(loss - direct) <= 1e-12
    with pytest.raises(ValueError):
        nll_loss(Tape(), tr, np.full(batch.ids.shape, 3))


def test_masked_positions_do_not_matter():
    rng = np.random.default_rng(12)
    params = random_model(rng, task="tag", C=2)
    batch = Batch.from_sequences([[5, 6], [7, 8, 9, 10]], [[0, 1], [1, 0, 0, 1]])
    other = Batch(batch.ids.copy(), batch.mask, batch.labels.copy())
    other.ids[0, 2:] = [20, 21]
    other.labels[0, 2:] = [1, 1]
    losses = []
    for b in (batch, other):
        params.zero_grad()
        tape = Tape()
        loss = nll_loss(tape, tag(tape, params, b), b.labels)
        tape.backward(loss)
        losses.append((float(loss.data), params["ffnn.w2"].grad.copy()))
    assert losses[0][0] == losses[1][0]
    np.testing.assert_array_equal(losses[0][1], losses[1][1])


def test_kl_identical_is_zero():
    rng = np.random.default_rng(13)
    params = random_model(rng, task="tag")
    batch = random_batch(rng, 30, 3, task="tag", labeled=False)
    a = tag(Tape(), params, batch)
    b = tag(Tape(), params, batch)
    assert abs(float(kl_loss(Tape(), a, b).data)) <= 1e-12


def test_kl_analytic_ln2():
    p = _trace([[[0.0, -800.0]]])
    q = _trace([[[math.log(0.5), math.log(0.5)]]])
    assert abs(float(kl_loss(Tape(), p, q).data) - math.log(2)) <= 1e-15


def test_kl_nonnegative_on_random_pairs():
    rng = np.random.default_rng(14)
    for _ in range(200):
        C = int(rng.integers(2, 6))
        lp = rng.standard_normal((1, C)) * 3
        lq = rng.standard_normal((1, C)) * 3
        lp -= np.log(np.exp(lp).sum())
        lq -= np.log(np.exp(lq).sum())
        kl = float(kl_loss(Tape(), _trace([lp]), _trace([lq])).data)
        assert kl >= -1e-12
        assert abs(kl - kl_direct(np.exp(lp[0]), np.exp(lq[0]))) <= 1e-12


def test_kl_length_mismatch():
    with pytest.raises(ValueError):
        kl_loss(Tape(), _trace([[[0.0, 0.0]]]), _trace([[[0.0, 0.0]], [[0.0, 0.0]]], task="tag"))


@pytest.mark.parametrize("task", ["classify", "tag"])
@pytest.mark.parametrize("kind", ["nll", "kl"])
def test_gradients_match_finite_differences(task, kind):
    rng = np.random.default_rng(15)
    params = random_model(rng, task=task, V=15, D=4, H=5, F=4, C=3)
    batch = random_batch(rng, 15, 3, task=task, B=2, T_max=4)
    r = clean = None
    if kind == "kl":
        # an independent model supplies the fixed distribution so the KL is O(1)
        other = random_model(rng, task=task, V=15, D=4, H=5, F=4, C=3)
        other["ffnn.w2"].data *= 20
        clean = (classify if task == "classify" else tag)(Tape(), other, batch)
        r = rng.standard_normal(batch.ids.shape + (4,)) * 0.5
    errors = model_gradient_errors(params, batch, kind, r, clean)
    assert max(errors.values()) <= 1e-6, errors
