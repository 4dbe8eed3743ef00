import numpy as np
import pytest

from advtext.autodiff import Tape
from advtext.models import Batch, forward, nll_loss
from advtext.perturb import (
    SCHEMES,
    advt_perturb,
    alpha_gradient,
    alpha_to_perturbation,
    best_one_hot,
    clean_trace,
    generate,
    iadvt_alpha,
    iadvt_best,
    iadvt_rand,
    ivat_alpha,
    kl_gradient,
    loss_gradient,
    neighbors_and_directions,
    random_perturb,
    sentence_norms,
    sentence_normalize,
    vat_perturb,
)

from oracles import central_difference, kl_value, nll_value, random_batch, random_model, rel_error


def setup(seed, task="classify", B=3, T_max=5, labeled=True, V=30, D=6):
    rng = np.random.default_rng(seed)
    params = random_model(rng, task=task, V=V, D=D)
    batch = random_batch(rng, V, 3, task=task, B=B, T_max=T_max, labeled=labeled)
    return rng, params, batch


def span_residual(pert, mask):
    worst = 0.0
    B, T, K, D = pert.directions.shape
    for b in range(B):
        for t in range(T):
            if not mask[b, t]:
                continue
            A = pert.directions[b, t].T
            coef, *_ = np.linalg.lstsq(A, pert.r[b, t], rcond=None)
            worst = max(worst, float(np.linalg.norm(A @ coef - pert.r[b, t])))
    return worst


def test_sentence_normalize_per_sentence():
    g = np.zeros((2, 3, 2))
    g[0, 0] = [3.0, 4.0]
    g[1, 2] = [1.0, 0.0]  # masked out below
    mask = np.array([[1, 1, 1], [1, 1, 0]], dtype=float)
    out = sentence_normalize(g, 2.0, mask)
    np.testing.assert_allclose(out[0, 0], [1.2, 1.6], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(out[1], 0.0)


def test_vanishing_gradient_gives_zero():
    g = np.full((1, 2, 3), 1e-14)
    out = sentence_normalize(g, 5.0, np.ones((1, 2)))
    np.testing.assert_array_equal(out, 0.0)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_norm_contract_every_scheme(scheme):
    for seed in range(10):
        rng, params, batch = setup(seed)
        eps = float(rng.uniform(0.1, 3.0))
        pert = generate(scheme, params, batch, eps, rng, k=5)
        field = pert.alpha if pert.alpha is not None else pert.r
        for n in sentence_norms(field):
            assert n == 0.0 or abs(n - eps) <= 1e-9
        padded = batch.mask == 0
        assert not pert.r[padded].any()


@pytest.mark.parametrize("scheme", ["iadvt", "ivat", "iadvt-rand", "iadvt-best"])
def test_span_restriction(scheme):
    for seed in range(10):
        rng, params, batch = setup(seed, D=8)
        pert = generate(scheme, params, batch, 1.0, rng, k=3)
        assert span_residual(pert, batch.mask) <= 1e-9


def test_alpha_to_perturbation_examples():
    rng = np.random.default_rng(0)
    d = rng.standard_normal((1, 2, 3, 4))
    np.testing.assert_array_equal(alpha_to_perturbation(np.zeros((1, 2, 3)), d), 0.0)
    a = np.zeros((1, 2, 3))
    a[0, 1, 2] = 0.7
    r = alpha_to_perturbation(a, d)
    np.testing.assert_array_equal(r[0, 1], 0.7 * d[0, 1, 2])
    np.testing.assert_array_equal(r[0, 0], 0.0)
    with pytest.raises(ValueError):
        alpha_to_perturbation(np.zeros((1, 2, 2)), d)


def test_advt_is_normalized_input_gradient():
    rng, params, batch = setup(1)
    eps = 0.8
    pert = advt_perturb(params, batch, eps)
    r0 = np.zeros(batch.ids.shape + (params.emb_dim,))
    g = central_difference(lambda: nll_value(params, batch, r0), r0) * batch.mask[:, :, None]
    for b in range(batch.size):
        expected = eps * g[b] / np.linalg.norm(g[b])
        assert rel_error(pert.r[b], expected) <= 1e-6


def test_advt_needs_labels_and_positive_eps():
    _, params, batch = setup(2, labeled=False)
    with pytest.raises(ValueError):
        advt_perturb(params, batch, 1.0)
    _, params, batch = setup(2)
    with pytest.raises(ValueError):
        advt_perturb(params, batch, 0.0)


def test_alpha_gradient_matches_finite_differences():
    rng, params, batch = setup(3)
    nbrs, dirs = neighbors_and_directions(params, batch, 4)
    analytic = alpha_gradient(params, batch, dirs)
    a = np.zeros(nbrs.shape)

    def loss():
        return nll_value(params, batch, alpha_to_perturbation(a, dirs, batch.mask))

    numeric = central_difference(loss, a) * batch.mask[:, :, None]
    assert rel_error(analytic, numeric) <= 1e-6


def test_self_direction_gets_zero_alpha():
    rng, params, batch = setup(4, B=1)
    E = params.embedding.data
    wid = int(batch.ids[0, 0])
    twin = 3 if wid != 3 else 4
    E[twin] = E[wid]
    nbrs, _ = neighbors_and_directions(params, batch, 3)
    assert nbrs[0, 0, 0] == twin
    dirs = neighbors_and_directions(params, batch, 3)[1]
    pert = iadvt_alpha(params, batch, nbrs, dirs, 1.0)
    assert pert.alpha[0, 0, 0] == 0.0


def test_iadvt_requires_neighbors():
    _, params, batch = setup(5)
    with pytest.raises(ValueError):
        iadvt_alpha(params, batch, None, None, 1.0)
    with pytest.raises(ValueError):
        ivat_alpha(params, batch, None, None, 1.0, 0.1, np.random.default_rng(0))


def constant_model(seed):
    rng, params, batch = setup(seed, labeled=False)
    params["ffnn.w2"].data[:] = 0
    return rng, params, batch


def test_vat_on_constant_model_is_zero():
    rng, params, batch = constant_model(6)
    assert not vat_perturb(params, batch, 1.0, 0.1, rng).r.any()
    nbrs, dirs = neighbors_and_directions(params, batch, 3)
    assert not ivat_alpha(params, batch, nbrs, dirs, 1.0, 0.1, rng).alpha.any()


def test_vat_ignores_labels():
    rng, params, batch = setup(7)
    unl = Batch(batch.ids, batch.mask, None)
    a = vat_perturb(params, batch, 1.0, 0.1, np.random.default_rng(1)).r
    b = vat_perturb(params, unl, 1.0, 0.1, np.random.default_rng(1)).r
    assert a.tobytes() == b.tobytes()


def test_vat_larger_eps_larger_kl():
    means = []
    for eps in (0.01, 0.1, 1.0):
        kls = []
        for seed in range(100):
            rng, params, batch = setup(seed, B=1, labeled=False)
            clean = clean_trace(params, batch)
            r = vat_perturb(params, batch, eps, 0.1 * eps, rng, clean=clean).r
            kls.append(kl_value(params, batch, clean, r))
        means.append(np.mean(kls))
    assert means[0] < means[1] < means[2]


def test_ivat_alpha_is_kl_gradient_dotted_with_directions():
    rng, params, batch = setup(8, labeled=False)
    for name in ("lstm_f.wx", "lstm_f.wh", "ffnn.w1", "ffnn.w2"):
        params[name].data *= 5
    nbrs, dirs = neighbors_and_directions(params, batch, 3)
    # a reference distribution far from the model's keeps the KL O(1), so the
    # finite differences are not swamped by cancellation
    other = random_model(rng)
    other["ffnn.w2"].data *= 20
    clean = clean_trace(other, batch)
    eps, xi = 1.0, 0.5
    pert = ivat_alpha(params, batch, nbrs, dirs, eps, xi, np.random.default_rng(3), clean=clean)
    a0 = sentence_normalize(np.random.default_rng(3).standard_normal(nbrs.shape), xi, batch.mask)
    a = a0.copy()
    numeric = central_difference(
        lambda: kl_value(params, batch, clean, alpha_to_perturbation(a, dirs, batch.mask)), a
    ) * batch.mask[:, :, None]
    expected = sentence_normalize(numeric, eps, batch.mask)
    assert rel_error(pert.alpha, expected) <= 1e-6
    analytic = np.einsum("btd,btkd->btk", kl_gradient(params, batch, alpha_to_perturbation(a0, dirs, batch.mask), clean), dirs)
    assert rel_error(analytic, numeric) <= 1e-6


def test_random_perturb_mean_near_zero_and_model_free():
    rng, params, batch = setup(9, B=1, T_max=1)
    n = 4000
    draws = np.stack([random_perturb(batch, 6, 1.0, rng).r[0, 0] for _ in range(n)])
    sigma = draws.std(axis=0)
    assert (np.abs(draws.mean(axis=0)) <= 3 * sigma / np.sqrt(n)).all()
    _, other, _ = setup(10)
    a = generate("random", params, batch, 1.0, np.random.default_rng(5)).r
    b = generate("random", other, batch, 1.0, np.random.default_rng(5)).r
    assert a.tobytes() == b.tobytes()


def test_iadvt_rand_one_direction_per_position():
    rng, params, batch = setup(11)
    nbrs, dirs = neighbors_and_directions(params, batch, 4)
    pert = iadvt_rand(batch, nbrs, dirs, 1.0, rng)
    nonzero = (pert.alpha != 0).sum(axis=2)
    np.testing.assert_array_equal(nonzero, batch.mask.astype(int))
    for b, t in zip(*np.nonzero(batch.mask)):
        k = int(np.flatnonzero(pert.alpha[b, t])[0])
        cos = pert.r[b, t] @ dirs[b, t, k] / np.linalg.norm(pert.r[b, t])
        assert abs(abs(cos) - 1.0) <= 1e-12


def test_iadvt_rand_uniform_frequency():
    _, params, batch = setup(12, B=1, T_max=1)
    K, n = 5, 1000
    nbrs, dirs = neighbors_and_directions(params, batch, K)
    rng = np.random.default_rng(0)
    counts = np.zeros(K)
    for _ in range(n):
        counts[np.flatnonzero(iadvt_rand(batch, nbrs, dirs, 1.0, rng).alpha[0, 0])[0]] += 1
    p = 1.0 / K
    assert (np.abs(counts / n - p) <= 3 * np.sqrt(p * (1 - p) / n)).all()


def test_best_one_hot_keeps_signed_largest():
    raw = np.array([[[0.1, -0.5, 0.3], [0.2, 0.0, -0.1]]])
    np.testing.assert_array_equal(best_one_hot(raw), [[[0.0, -0.5, 0.0], [0.2, 0.0, 0.0]]])


def test_iadvt_best_picks_largest_magnitude():
    rng, params, batch = setup(13)
    nbrs, dirs = neighbors_and_directions(params, batch, 4)
    raw = alpha_gradient(params, batch, dirs)
    pert = iadvt_best(params, batch, nbrs, dirs, 1.0)
    for b, t in zip(*np.nonzero(batch.mask)):
        k = int(np.flatnonzero(pert.alpha[b, t])[0])
        assert k == int(np.argmax(np.abs(raw[b, t])))
        assert np.sign(pert.alpha[b, t, k]) == np.sign(raw[b, t, k])


def test_iadvt_best_matches_exhaustive_one_hot_search():
    # single-position sentences, tiny eps: the loss is linear to first order
    eps = 1e-4
    for seed in range(20):
        rng, params, batch = setup(seed, B=1, T_max=1)
        nbrs, dirs = neighbors_and_directions(params, batch, 5)
        pert = iadvt_best(params, batch, nbrs, dirs, eps)
        best, best_loss = None, -np.inf
        for k in range(5):
            for s in (1.0, -1.0):
                r = (s * eps * dirs[0, 0, k])[None, None]
                val = nll_value(params, batch, r)
                if val > best_loss:
                    best, best_loss = (k, s), val
        k = int(np.flatnonzero(pert.alpha[0, 0])[0])
        assert (k, np.sign(pert.alpha[0, 0, k])) == best


def test_adversarial_beats_random_in_small_eps_regime():
    wins = 0
    for seed in range(50):
        rng, params, batch = setup(seed, B=1)
        r_adv = advt_perturb(params, batch, 0.1).r
        r_rand = random_perturb(batch, params.emb_dim, 0.1, rng).r
        wins += nll_value(params, batch, r_adv) >= nll_value(params, batch, r_rand)
    assert wins >= 45


def test_directional_derivative_dominates_random():
    h = 1e-6
    wins = 0
    for seed in range(30):
        rng, params, batch = setup(seed, B=1)
        r_adv = advt_perturb(params, batch, 1.0).r
        r_rand = random_perturb(batch, params.emb_dim, 1.0, rng).r
        base = np.zeros_like(r_adv)

        def deriv(r):
            return (nll_value(params, batch, base + h * r) - nll_value(params, batch, base - h * r)) / (2 * h)

        wins += deriv(r_adv) >= deriv(r_rand)
    assert wins >= 27


def test_tagging_batches_work_for_every_scheme():
    for scheme in SCHEMES:
        rng, params, batch = setup(14, task="tag")
        pert = generate(scheme, params, batch, 1.0, rng, k=3)
        assert pert.r.shape == batch.ids.shape + (params.emb_dim,)


def test_unknown_scheme():
    rng, params, batch = setup(15)
    with pytest.raises(ValueError):
        generate("fgsm", params, batch, 1.0, rng)


def test_perturbation_never_touches_parameters():
    rng, params, batch = setup(16)
    before = {n: t.data.copy() for n, t in params.tensors.items()}
    params.zero_grad()
    for scheme in SCHEMES:
        generate(scheme, params, batch, 1.0, rng, k=3)
    for n, t in params.tensors.items():
        assert t.data.tobytes() == before[n].tobytes()
        assert t.grad is None or not t.grad.any()
