import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ewc_lab import autodiff as ad
from ewc_lab.autodiff import ParamVector, make_layout
from ewc_lab.model import log_softmax_graph, nll_loss


def vec(*xs):
    return ParamVector(np.array(xs, dtype=float), make_layout([("t", (len(xs),))]))


def test_forward_affine():
    root = ad.constant(3.0) * ad.constant(2.0) + ad.constant(1.0)
    assert ad.forward(root) == 7.0


def test_relu_negative_is_zero():
    assert ad.forward(ad.relu(ad.constant(-5.0))) == 0.0


def test_log_softmax_uniform():
    out = ad.forward(log_softmax_graph(ad.constant(np.zeros((1, 2)))))
    assert out[0, 0] == pytest.approx(-np.log(2), abs=1e-15)


def test_square_gradient():
    p = vec(3.0)
    th = ad.parameter(p)
    root = ad.total(th * th)
    ad.forward(root)
    assert ad.backward(root).values.tolist() == [6.0]


def test_product_gradient():
    p = vec(2.0, 5.0)

    def build(q):
        th = ad.parameter(q)
        return ad.total(ad.take(th, "t") * ad.constant(np.array([1.0, 0.0]))) * \
            ad.total(ad.take(th, "t") * ad.constant(np.array([0.0, 1.0])))

    _, g = ad.value_and_grad(build, p)
    assert g.values.tolist() == [5.0, 2.0]


def test_root_adjoint_is_one(small_mlp):
    params, batch = small_mlp
    root = nll_loss(params, batch)
    ad.forward(root)
    ad.backward(root)
    assert root.adjoint == 1.0


def test_backward_before_forward_is_stale():
    root = ad.total(ad.parameter(vec(1.0)))
    with pytest.raises(ad.StaleGraphError):
        ad.backward(root)


def test_overflow_names_op():
    root = ad.total(ad.exp(ad.parameter(vec(1000.0))))
    with pytest.raises(ad.NumericalOverflowError) as info:
        ad.forward(root)
    assert info.value.op is ad.Op.EXP


def test_log_of_zero_raises():
    with pytest.raises(ad.NumericalOverflowError):
        ad.forward(ad.log(ad.constant(0.0)))


def test_mlp_single_sample_matches_fd(small_mlp):
    params, batch = small_mlp
    rep = ad.grad_check(lambda p: nll_loss(p, batch.subset([0])), params, 1e-5, 1e-5)
    assert rep.passed, rep.max_rel_error


def test_quadratic_grad_check():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(4, 4))
    Q = A @ A.T
    p = ParamVector(rng.normal(size=4), make_layout([("q", (4,))]))

    def build(q):
        th = ad.parameter(q)
        return ad.total(ad.matmul_acc(th, ad.constant(0.5 * Q)) * th)

    rep = ad.grad_check(build, p, 1e-5, 1e-6)
    assert rep.passed and rep.max_rel_error < 1e-6
    _, g = ad.value_and_grad(build, p)
    np.testing.assert_allclose(g.values, Q @ p.values, rtol=1e-12)


def test_kink_is_excluded_not_failed():
    p = vec(0.0, 1.0)

    def build(q):
        return ad.total(ad.relu(ad.parameter(q)))

    rep = ad.grad_check(build, p)
    assert rep.excluded == [0]
    assert rep.passed


def test_gradient_determinism(small_mlp):
    params, batch = small_mlp
    root = nll_loss(params, batch)
    ad.forward(root)
    g1 = ad.backward(root).values.copy()
    ad.forward(root)
    g2 = ad.backward(root).values
    assert np.array_equal(g1, g2)


def test_sum_of_losses_is_sum_of_gradients(small_mlp):
    params, batch = small_mlp
    a, b = batch.subset(slice(0, 5)), batch.subset(slice(5, 12))

    def both(p):
        th = ad.parameter(p)
        from ewc_lab.model import nll_graph
        return nll_graph(th, a) + nll_graph(th, b)

    _, g = ad.value_and_grad(both, params)
    _, ga = ad.value_and_grad(lambda p: nll_loss(p, a), params)
    _, gb = ad.value_and_grad(lambda p: nll_loss(p, b), params)
    np.testing.assert_allclose(g.values, ga.values + gb.values, atol=1e-10, rtol=0)


def test_shape_mismatch_rejected():
    with pytest.raises(ad.ShapeError):
        ad.forward(ad.constant(np.ones(3)) + ad.constant(np.ones(4)))


def test_layout_length_checked():
    with pytest.raises(ad.ShapeError):
        ParamVector(np.zeros(3), make_layout([("a", (2, 2))]))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=6))
def test_elementwise_ops_match_fd(xs):
    p = vec(*xs)

    def build(q):
        th = ad.parameter(q)
        return ad.total(ad.exp(th * ad.constant(0.5)) + ad.log(th * th + ad.constant(1.0)) - th)

    assert ad.grad_check(build, p, 1e-5, 1e-4).passed


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=5), st.floats(-50, 50))
def test_log_softmax_shift_invariant(row, c):
    x = np.array([row])
    a = ad.forward(log_softmax_graph(ad.constant(x)))
    b = ad.forward(log_softmax_graph(ad.constant(x + c)))
    np.testing.assert_allclose(a, b, atol=1e-12)
