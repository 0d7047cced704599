import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit, softmax

from ewc_lab.autodiff import ParamVector, make_layout
from ewc_lab.fisher import (CapacityError, FisherEstimate, InputError, estimate_fisher,
                            hessian_oracle, per_example_grads, per_example_grads_loop, validate_psd)
from ewc_lab.model import Architecture, Batch, init_params, logistic_layout


def numpy_scores(params, x, y):
    """Per-example gradient of -log p(y|x) for a one-hidden-layer relu MLP, by hand."""
    W0, b0, W1, b1 = (params.view(n) for n in ("W0", "b0", "W1", "b1"))
    pre = x @ W0 + b0
    h = np.maximum(pre, 0)
    p = softmax(h @ W1 + b1, axis=1)
    d2 = p.copy()
    d2[np.arange(len(y)), y] -= 1
    d1 = (d2 @ W1.T) * (pre > 0)
    rows = [np.concatenate([np.outer(x[i], d1[i]).ravel(), d1[i], np.outer(h[i], d2[i]).ravel(), d2[i]])
            for i in range(len(y))]
    return np.array(rows)


def test_batched_scores_match_hand_backprop(small_mlp):
    params, batch = small_mlp
    idx = np.arange(len(batch))
    got = per_example_grads(params, batch, batch.labels, idx)
    np.testing.assert_allclose(got, numpy_scores(params, batch.inputs, batch.labels), atol=1e-13)
    np.testing.assert_allclose(got, per_example_grads_loop(params, batch, batch.labels, idx), atol=1e-13)


def test_bernoulli_fisher_at_zero():
    at0 = ParamVector(np.zeros(1), logistic_layout(1))
    F = estimate_fisher(at0, Batch(np.ones((1, 1)), np.array([1])), sample_count=10_000, seed=3)
    assert abs(F.values[0] - 0.25) / 0.25 < 0.05


def test_constant_model_gives_zero_fisher():
    p = ParamVector(np.array([0.7]), logistic_layout(1))
    F = estimate_fisher(p, Batch(np.zeros((5, 1)), np.zeros(5, dtype=int)), "full")
    assert not F.values.any()


def test_full_diagonal_equals_diagonal(small_mlp):
    params, batch = small_mlp
    full = estimate_fisher(params, batch, "full", sample_count=40, seed=9)
    diag = estimate_fisher(params, batch, "diagonal", sample_count=40, seed=9)
    assert np.array_equal(np.diag(full.values), diag.values)


def test_label_empirical_uses_labels(small_mlp):
    params, batch = small_mlp
    F = estimate_fisher(params, batch, "full", "label-empirical")
    g = numpy_scores(params, batch.inputs, batch.labels)
    np.testing.assert_allclose(F.values, g.T @ g / len(batch), atol=1e-13)


def test_hessian_of_quadratic():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(4, 4))
    Q = A @ A.T + np.eye(4)
    p = ParamVector(rng.normal(size=4), make_layout([("q", (4,))]))
    H = hessian_oracle(p, None, 1e-3, loss_fn=lambda q: 0.5 * q.values @ Q @ q.values).matrix
    assert np.abs(H - Q).max() / np.abs(Q).max() < 1e-6


def test_hessian_symmetric_and_matches_fisher_at_mle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(10_000, 1))
    y = (rng.random(10_000) < expit(x[:, 0])).astype(int)
    from ewc_lab.checks import GraphModel
    from ewc_lab.laplace import find_mode
    mode, _, _ = find_mode(GraphModel(logistic_layout(1)), Batch(x, y), None, [0.0])
    p = ParamVector(mode, logistic_layout(1))
    H = hessian_oracle(p, Batch(x, y)).matrix
    F = estimate_fisher(p, Batch(x, y), seed=1).values
    assert abs(F[0] - H[0, 0]) / H[0, 0] < 0.05


def test_hessian_symmetry_mlp():
    rng = np.random.default_rng(0)
    p = init_params(Architecture((2, 3, 2), 0))
    b = Batch(rng.normal(size=(20, 2)), rng.integers(0, 2, 20))
    H = hessian_oracle(p, b).matrix
    assert np.abs(H - H.T).max() / np.abs(H).max() < 1e-4


def test_doubling_samples_halves_variance():
    p = ParamVector(np.array([1.0]), logistic_layout(1))
    one = Batch(np.ones((1, 1)), np.array([0]))
    v = {m: np.var([estimate_fisher(p, one, sample_count=m, seed=s).values[0] for s in range(100)])
         for m in (50, 100)}
    assert 0.35 <= v[100] / v[50] <= 0.7


def test_two_seeds_within_three_standard_errors():
    p = ParamVector(np.array([1.0]), logistic_layout(1))
    one = Batch(np.ones((1, 1)), np.array([0]))
    s = expit(1.0)
    exact = s * (1 - s)
    # per-sample squared score is (1-s)^2 w.p. s and s^2 w.p. 1-s
    sd = np.sqrt(s * (1 - s) * ((1 - s) ** 2 - s ** 2) ** 2)
    for seed in (0, 1):
        est = estimate_fisher(p, one, sample_count=10_000, seed=seed).values[0]
        assert abs(est - exact) < 3 * sd / 100


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 50), st.sampled_from(["diagonal", "full"]))
def test_model_sampled_is_psd(seed, m, kind):
    rng = np.random.default_rng(seed)
    p = init_params(Architecture((2, 3, 3), seed % 97))
    b = Batch(rng.normal(size=(10, 2)), rng.integers(0, 3, 10))
    assert validate_psd(estimate_fisher(p, b, kind, sample_count=m, seed=seed)).passed


def test_validate_psd_rejects():
    assert not validate_psd(FisherEstimate("diagonal", np.array([1.0, -1.0]), 1, "label-empirical")).passed
    rep = validate_psd(FisherEstimate("full", np.array([[1.0, 2.0], [2.0, 1.0]]), 1, "label-empirical"))
    assert not rep.passed and rep.min_eigenvalue == pytest.approx(-1.0)


def test_seeded_reproducible(small_mlp):
    params, batch = small_mlp
    assert estimate_fisher(params, batch, seed=4) == estimate_fisher(params, batch, seed=4)


def test_guards(small_mlp):
    params, batch = small_mlp
    with pytest.raises(InputError):
        estimate_fisher(params, batch.subset([]))
    with pytest.raises(InputError):
        estimate_fisher(params, batch, sample_count=0)
    big = init_params(Architecture((50, 50, 2)))
    with pytest.raises(CapacityError):
        estimate_fisher(big, Batch(np.zeros((1, 50)), np.array([0])), "full")
    with pytest.raises(CapacityError):
        hessian_oracle(big, None)
