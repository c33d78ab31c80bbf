"""Gradient integrity and tape semantics for the reverse-mode engine."""

import numpy as np
import pytest

from pocketgfn import autodiff as ad
from pocketgfn.autodiff import (
    DimensionError,
    Tape,
    TapeError,
    backward,
    concat,
    einsum2,
    finite_diff_check,
    gather_rows,
    layer_norm_rows,
    log_softmax_rows,
    matmul,
    mean_rows,
    relu,
    softmax_rows,
    sum_all,
    tensor,
)

RNG = np.random.default_rng(1234)

PRIMITIVE_TOL = 1e-4
COMPOSITE_TOL = 1e-3


def rand(*shape):
    # keep inputs in [-1, 1]; relu/sqrt variants shift as needed
    return tensor(RNG.uniform(-1.0, 1.0, size=shape))


class TestForwardValues:
    def test_softmax_rows_known_value(self):
        x = tensor([[1.0, 2.0, 3.0]])
        with Tape():
            y = softmax_rows(x)
        np.testing.assert_allclose(y.data, [[0.09003057, 0.24472847, 0.66524096]], atol=1e-8)

    def test_matmul_known_value(self):
        a = tensor([[1.0, 2.0], [3.0, 4.0]])
        b = tensor([[1.0], [1.0]])
        with Tape():
            y = matmul(a, b)
        np.testing.assert_allclose(y.data, [[3.0], [7.0]])

    def test_softmax_rows_sum_to_one(self):
        x = rand(5, 7)
        with Tape():
            y = softmax_rows(x)
        np.testing.assert_allclose(y.data.sum(axis=1), np.ones(5), atol=1e-12)

    def test_masked_softmax_exact_zeros(self):
        x = rand(3, 4)
        mask = np.array(
            [
                [True, False, True, True],
                [False, True, True, False],
                [True, True, True, True],
            ]
        )
        with Tape():
            y = softmax_rows(x, mask=mask)
        assert np.all(y.data[~mask] == 0.0)
        np.testing.assert_allclose(y.data.sum(axis=1), np.ones(3), atol=1e-12)

    def test_fully_masked_row_rejected(self):
        x = rand(2, 3)
        mask = np.array([[True, True, True], [False, False, False]])
        with pytest.raises(ValueError):
            with Tape():
                softmax_rows(x, mask=mask)

    def test_log_softmax_masked_is_neg_inf(self):
        x = rand(2, 3)
        mask = np.array([[True, False, True], [True, True, True]])
        with Tape():
            y = log_softmax_rows(x, mask=mask)
        assert y.data[0, 1] == -np.inf
        np.testing.assert_allclose(np.exp(y.data[1]).sum(), 1.0, atol=1e-12)

    def test_layer_norm_rows_standardizes(self):
        x = rand(4, 9)
        with Tape():
            y = layer_norm_rows(x)
        np.testing.assert_allclose(y.data.mean(axis=1), np.zeros(4), atol=1e-12)
        np.testing.assert_allclose(y.data.var(axis=1), np.ones(4), atol=1e-4)

    def test_matmul_shape_error_names_shapes(self):
        a = rand(2, 3)
        b = rand(4, 5)
        with pytest.raises(DimensionError, match=r"\(2, 3\)"):
            matmul(a, b)

    def test_einsum2_rejects_repeated_index_within_operand(self):
        a = rand(3, 3)
        b = rand(3, 2)
        with pytest.raises(DimensionError):
            einsum2("ii,ij->ij", a, b)

    def test_einsum2_rejects_unsummable_index(self):
        a = rand(3, 4)
        b = rand(5, 2)
        # 'j' appears only in the first operand and not in the output
        with pytest.raises(DimensionError):
            einsum2("ij,kl->ikl", a, b)

    def test_gather_rows_forward(self):
        x = tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        with Tape():
            y = gather_rows(x, np.array([2, 0, 2]))
        np.testing.assert_allclose(y.data, [[5.0, 6.0], [1.0, 2.0], [5.0, 6.0]])


class TestTapeSemantics:
    def test_no_tape_no_graph(self):
        x = rand(2, 2)
        y = ad.add(x, x)
        assert y._tape is None
        with pytest.raises(TapeError):
            backward(y and sum_all(y))

    def test_backward_requires_scalar(self):
        x = rand(2, 2)
        with Tape():
            y = ad.add(x, x)
        with pytest.raises(TapeError):
            backward(y)

    def test_backward_twice_rejected(self):
        x = rand(3, 3)
        with Tape():
            loss = sum_all(ad.mul(x, x))
        backward(loss)
        with pytest.raises(TapeError):
            backward(loss)

    def test_grad_accumulates_across_uses(self):
        x = tensor([[2.0]])
        with Tape():
            y = ad.add(ad.mul(x, x), x)  # x^2 + x, d/dx = 2x + 1 = 5
            loss = sum_all(y)
        backward(loss)
        np.testing.assert_allclose(x.grad, [[5.0]])

    def test_nested_tapes_are_independent(self):
        x = rand(2, 2)
        with Tape():
            a = ad.mul(x, x)
            with Tape():
                b = ad.mul(x, x)
                backward(sum_all(b))
            inner_grad = x.grad.copy()
            x.grad = None
            backward(sum_all(a))
        np.testing.assert_allclose(x.grad, inner_grad)


def _check(f, x, tol=PRIMITIVE_TOL):
    report = finite_diff_check(f, x, tol=tol)
    assert report.passed, str(report)


class TestPrimitiveGradients:
    def test_add(self):
        y = rand(3, 4)
        _check(lambda x: ad.add(x, y), rand(3, 4))

    def test_add_broadcast_bias(self):
        b = rand(4)
        _check(lambda x: ad.add(x, b), rand(3, 4))

    def test_sub(self):
        y = rand(3, 4)
        _check(lambda x: ad.sub(y, x), rand(3, 4))

    def test_mul(self):
        y = rand(3, 4)
        _check(lambda x: ad.mul(x, y), rand(3, 4))

    def test_mul_same_tensor_twice(self):
        _check(lambda x: ad.mul(x, x), rand(3, 3))

    def test_scale(self):
        _check(lambda x: ad.scale(x, -2.5), rand(2, 5))

    def test_neg(self):
        _check(lambda x: ad.neg(x), rand(4,))

    def test_matmul_left(self):
        b = rand(4, 2)
        _check(lambda x: matmul(x, b), rand(3, 4))

    def test_matmul_right(self):
        a = rand(3, 4)
        _check(lambda x: matmul(a, x), rand(4, 2))

    def test_einsum2_pairwise_contraction(self):
        k = rand(5, 4)
        _check(lambda x: einsum2("ic,jc->ij", x, k), rand(3, 4))

    def test_einsum2_batched(self):
        v = rand(2, 5, 4)
        _check(lambda x: einsum2("hij,hjc->hic", x, v), rand(2, 3, 5))

    def test_relu(self):
        # keep inputs away from the kink at 0
        x = tensor(RNG.uniform(0.1, 1.0, size=(3, 4)) * RNG.choice([-1.0, 1.0], size=(3, 4)))
        _check(relu, x)

    def test_tanh(self):
        _check(ad.tanh, rand(3, 4))

    def test_exp(self):
        _check(ad.exp, rand(3, 4))

    def test_log(self):
        x = tensor(RNG.uniform(0.5, 2.0, size=(3, 4)))
        _check(ad.log, x)

    def test_sqrt(self):
        x = tensor(RNG.uniform(0.5, 2.0, size=(3, 4)))
        _check(ad.sqrt, x)

    def test_softmax_rows(self):
        _check(softmax_rows, rand(3, 5))

    def test_softmax_rows_masked(self):
        mask = RNG.random((4, 6)) > 0.3
        mask[:, 0] = True
        _check(lambda x: softmax_rows(x, mask=mask), rand(4, 6))

    def test_log_softmax_rows(self):
        _check(log_softmax_rows, rand(3, 5))

    def test_log_softmax_rows_masked_grad_zero_at_masked(self):
        mask = np.array([[True, True, False], [True, True, True]])
        x = rand(2, 3)
        with Tape():
            y = log_softmax_rows(x, mask=mask)
            # only sum unmasked entries; -inf at masked ones must not pollute
            picked = gather_rows(ad.reshape(y, (6, 1)), np.array([0, 1, 3, 4, 5]))
            loss = sum_all(picked)
        backward(loss)
        assert x.grad[0, 2] == 0.0

    def test_layer_norm_rows(self):
        _check(layer_norm_rows, rand(4, 6))

    def test_concat(self):
        b = rand(3, 2)
        _check(lambda x: concat([x, b], axis=1), rand(3, 4))

    def test_gather_rows_with_duplicates(self):
        idx = np.array([0, 2, 2, 1])
        _check(lambda x: gather_rows(x, idx), rand(3, 4))

    def test_reshape(self):
        _check(lambda x: ad.reshape(x, (2, 6)), rand(3, 4))

    def test_permute(self):
        _check(lambda x: ad.permute(x, (1, 0, 2)), rand(2, 3, 4))

    def test_sum_all(self):
        _check(sum_all, rand(3, 4))

    def test_mean_rows(self):
        _check(mean_rows, rand(5, 3))

    def test_square(self):
        _check(ad.square, rand(3, 4))


class TestCompositeGradients:
    def test_two_layer_mlp(self):
        w1, b1, w2, b2 = rand(4, 8), rand(8), rand(8, 2), rand(2)

        def f(x):
            h = relu(ad.add(matmul(x, w1), b1))
            return ad.add(matmul(h, w2), b2)

        report = finite_diff_check(f, rand(5, 4), tol=COMPOSITE_TOL)
        assert report.passed, str(report)

    def test_attention_block(self):
        wq, wk, wv = rand(4, 4), rand(4, 4), rand(4, 4)

        def f(x):
            q = matmul(x, wq)
            k = matmul(x, wk)
            v = matmul(x, wv)
            logits = ad.scale(einsum2("ic,jc->ij", q, k), 0.5)
            att = softmax_rows(logits)
            return matmul(att, v)

        report = finite_diff_check(f, rand(6, 4), tol=COMPOSITE_TOL)
        assert report.passed, str(report)

    def test_layernorm_mlp_residual(self):
        w = rand(5, 5)

        def f(x):
            h = layer_norm_rows(x)
            return ad.add(x, relu(matmul(h, w)))

        report = finite_diff_check(f, rand(4, 5), tol=COMPOSITE_TOL)
        assert report.passed, str(report)


class TestNegativeControl:
    def test_wrong_backward_is_caught(self):
        # a deliberately wrong vjp (factor 3 instead of 2) must fail the check
        def bad_square(x):
            out = ad._record(x.data**2, (x,), lambda g, x=x: (3.0 * x.data * g,))
            return out

        report = finite_diff_check(bad_square, rand(3, 3), tol=PRIMITIVE_TOL)
        assert not report.passed

    def test_report_str_mentions_tolerance(self):
        report = finite_diff_check(ad.tanh, rand(2, 2), tol=PRIMITIVE_TOL)
        assert "1.0e-04" in str(report)


class TestDeterminism:
    def test_same_seed_same_check(self):
        x1 = tensor(np.linspace(-1, 1, 12).reshape(3, 4))
        x2 = tensor(np.linspace(-1, 1, 12).reshape(3, 4))
        r1 = finite_diff_check(ad.tanh, x1, seed=7)
        r2 = finite_diff_check(ad.tanh, x2, seed=7)
        assert r1.max_rel_err == r2.max_rel_err
