import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ewc_lab.autodiff import ShapeError
from ewc_lab.model import (Architecture, Batch, accuracy, init_params, nll_value, predict,
                           zero_params)


def test_param_count():
    p = init_params(Architecture((2, 3, 2), 0))
    assert len(p) == 2 * 3 + 3 + 3 * 2 + 2 == 17


def test_init_deterministic_and_zero_bias():
    arch = Architecture((4, 6, 3), 5)
    a, b = init_params(arch), init_params(arch)
    assert a == b
    assert not a.view("b0").any() and not a.view("b1").any()
    assert init_params(Architecture((4, 6, 3), 6)) != a


def test_init_glorot_bounds():
    p = init_params(Architecture((10, 30), 0))
    assert np.abs(p.view("W0")).max() <= np.sqrt(6 / 40)


def test_zero_params_loss_is_log2():
    arch = Architecture((3, 4, 2))
    rng = np.random.default_rng(0)
    b = Batch(rng.normal(size=(7, 3)), rng.integers(0, 2, 7))
    assert nll_value(zero_params(arch.layout()), b) == pytest.approx(np.log(2), abs=1e-15)


def test_perfect_prediction_loss_zero():
    arch = Architecture((1, 2))
    p = zero_params(arch.layout())
    v = p.values.copy()
    v[p.layout[0].offset + 1] = 1e3  # W0[0, 1]
    p = p.with_values(v)
    assert nll_value(p, Batch(np.ones((1, 1)), np.array([1]))) == 0.0


def test_concatenated_batch_is_weighted_mean(small_mlp):
    params, batch = small_mlp
    a, b = batch.subset(slice(0, 4)), batch.subset(slice(4, 12))
    whole = nll_value(params, batch)
    assert whole == pytest.approx((4 * nll_value(params, a) + 8 * nll_value(params, b)) / 12, abs=1e-14)


def test_predict_zero_params_uniform():
    arch = Architecture((2, 3))
    out = predict(zero_params(arch.layout()), np.ones((4, 2)))
    np.testing.assert_allclose(out, 1 / 3, atol=1e-15)


def test_predict_argmax_matches_numpy_oracle(small_mlp):
    params, batch = small_mlp
    h = np.maximum(batch.inputs @ params.view("W0") + params.view("b0"), 0)
    logits = h @ params.view("W1") + params.view("b1")
    assert np.array_equal(predict(params, batch.inputs).argmax(1), logits.argmax(1))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**16), st.floats(-30, 30))
def test_predict_rows_normalised_and_shift_invariant(seed, c):
    rng = np.random.default_rng(seed)
    arch = Architecture((2, 3), seed)
    p = init_params(arch)
    p = p.with_values(p.values + rng.normal(size=len(p)))
    x = rng.normal(size=(5, 2))
    out = predict(p, x)
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(1), 1, atol=1e-12)
    # adding c to every logit of a row = shifting that row's bias contribution
    v = p.values.copy()
    off = p.layout[1].offset
    v[off:off + 3] += c
    np.testing.assert_allclose(predict(p.with_values(v), x), out, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**16))
def test_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p = init_params(Architecture((3, 4, 3), seed))
    p = p.with_values(p.values * 5)
    assert nll_value(p, Batch(rng.normal(size=(6, 3)), rng.integers(0, 3, 6))) >= 0


def test_accuracy_random_params_near_half():
    rng = np.random.default_rng(0)
    n = 10_000
    x = rng.normal(size=(n, 8))
    y = rng.permutation(np.arange(n) % 2)
    p = init_params(Architecture((8, 16, 2), 3))
    assert abs(accuracy(p, Batch(x, y)) - 0.5) <= 0.03


def test_accuracy_batch_of_one(small_mlp):
    params, batch = small_mlp
    assert accuracy(params, batch.subset([0])) in (0.0, 1.0)


def test_separable_training_reaches_095():
    from ewc_lab.ewc import PenaltyLedger
    from ewc_lab.tasks import gen_gaussian_clusters
    from ewc_lab.trainer import TrainConfig, train_single
    spec = gen_gaussian_clusters(0, 300, 300, 2, 2, 8.0)
    p, _ = train_single(init_params(Architecture((2, 8, 2))), spec, PenaltyLedger(),
                        TrainConfig("finetune", epochs=5))
    assert accuracy(p, spec.train) >= 0.95


def test_batch_validation():
    with pytest.raises(ShapeError):
        Batch(np.ones(3), np.zeros(3, dtype=int))
    with pytest.raises(ShapeError):
        Batch(np.ones((3, 2)), np.zeros(2, dtype=int))
    with pytest.raises(ValueError):
        Architecture((3,))
