import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from memground import autodiff as ad
from memground.autodiff import (DegenerateVectorWarning, NumericError,
                                ShapeError, Tensor)


def rand_tensor(rng, rows, cols, requires_grad=True):
    return Tensor(rng.standard_normal((rows, cols)), requires_grad=requires_grad)


class TestMatmul:
    def test_identity(self):
        x = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = Tensor(np.eye(2)) @ x
        assert np.array_equal(out.values, x.values)

    def test_hand_product(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
        assert np.array_equal(out.values, [[3.0], [7.0]])

    def test_zeros_annihilate(self):
        out = Tensor(np.zeros((2, 3))) @ Tensor(np.ones((3, 4)))
        assert out.shape == (2, 4)
        assert np.all(out.values == 0.0)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 4\)"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 4)))


class TestRowSoftmax:
    def test_uniform_inputs(self):
        out = ad.row_softmax(Tensor([[0.0, 0.0]]))
        assert np.allclose(out.values, [[0.5, 0.5]], atol=1e-15)

    def test_analytic(self):
        out = ad.row_softmax(Tensor([[math.log(2.0), 0.0]]))
        assert np.allclose(out.values, [[2.0 / 3.0, 1.0 / 3.0]], atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        out = ad.row_softmax(Tensor(50.0 * rng.standard_normal((4, 5))))
        assert np.allclose(out.values.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(out.values > 0.0)

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            ad.row_softmax(Tensor([[np.nan, 1.0]]))

    def test_inf_rejected(self):
        with pytest.raises(NumericError):
            ad.row_softmax(Tensor([[np.inf, 1.0]]))

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_row_stochastic_property(self, seed):
        rng = np.random.default_rng(seed)
        rows, cols = int(rng.integers(1, 8)), int(rng.integers(1, 8))
        out = ad.row_softmax(Tensor(20.0 * rng.standard_normal((rows, cols))))
        assert np.allclose(out.values.sum(axis=1), 1.0, atol=1e-9)


class TestCosineSim:
    def test_self_similarity(self):
        rng = np.random.default_rng(1)
        v = rng.standard_normal(5)
        assert ad.cosine_sim(v, v) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert ad.cosine_sim([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_analytic(self):
        assert ad.cosine_sim([1.0, 1.0], [1.0, 0.0]) == pytest.approx(1 / math.sqrt(2), abs=1e-9)

    def test_degenerate_returns_zero_with_warning(self):
        with pytest.warns(DegenerateVectorWarning):
            assert ad.cosine_sim([0.0, 0.0], [1.0, 0.0]) == 0.0

    def test_output_clamped(self):
        v = np.array([1e-8, 1e-8])
        assert -1.0 <= ad.cosine_sim(v, v) <= 1.0


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(Tensor([[0.0]])).item() == pytest.approx(0.5, abs=1e-15)

    def test_sigmoid_strictly_inside_unit_interval(self):
        out = ad.sigmoid(Tensor([[-1e4, -40.0, 0.0, 40.0, 1e4]]))
        assert np.all(out.values > 0.0)
        assert np.all(out.values < 1.0)

    def test_concat_cols_shape(self):
        out = ad.concat_cols([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2)))])
        assert out.shape == (2, 5)

    def test_mul_identity(self):
        rng = np.random.default_rng(2)
        x = rand_tensor(rng, 3, 4)
        assert np.array_equal((x * Tensor(np.ones((3, 4)))).values, x.values)

    def test_concat_row_mismatch(self):
        with pytest.raises(ShapeError):
            ad.concat_cols([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))])

    def test_add_broadcast_row(self):
        x = Tensor(np.ones((3, 2)))
        b = Tensor([[1.0, 2.0]])
        assert np.array_equal((x + b).values, [[2.0, 3.0]] * 3)

    def test_add_incompatible(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((3, 2))) + Tensor(np.ones((2, 3)))

    def test_huber_values(self):
        out = ad.huber(Tensor([[0.5, 1.0, -2.0]]))
        assert np.allclose(out.values, [[0.125, 0.5, 1.5]], atol=1e-15)

    def test_embedding_rejects_out_of_range(self):
        table = Tensor(np.ones((4, 2)))
        with pytest.raises(ValueError, match="id 7"):
            ad.embedding_rows(table, [0, 7])


class TestBackward:
    def test_requires_scalar(self):
        x = rand_tensor(np.random.default_rng(0), 2, 2)
        with pytest.raises(ShapeError):
            (x + x).backward()

    def test_grad_accumulates_through_reuse(self):
        x = Tensor([[3.0]], requires_grad=True)
        y = x * x  # dy/dx = 2x = 6
        y.backward()
        assert x.grad[0, 0] == pytest.approx(6.0)

    def test_non_required_stays_zero(self):
        x = Tensor([[2.0]], requires_grad=True)
        c = Tensor([[5.0]])
        (x * c).backward()
        assert np.all(c.grad == 0.0)
        assert x.grad[0, 0] == pytest.approx(5.0)

    def test_no_grad_blocks_recording(self):
        x = Tensor([[2.0]], requires_grad=True)
        with ad.no_grad():
            y = x * x
        assert not y.requires_grad
        assert y._backward is None

    def test_graph_freed_after_backward(self):
        x = Tensor([[2.0]], requires_grad=True)
        y = (x * x).sum()
        y.backward()
        assert y._backward is None and y._parents == ()


UNARY_OPS = [ad.sigmoid, ad.tanh, ad.relu, ad.softplus, ad.exp, ad.huber,
             ad.row_softmax, ad.transpose,
             lambda t: ad.clamp(t, -0.8, 0.8),
             lambda t: ad.tsum(t, axis=0), lambda t: ad.tsum(t, axis=1),
             ad.tmean, lambda t: ad.slice_rows(t, 1, 3),
             lambda t: ad.slice_cols(t, 0, 2), lambda t: ad.affine(t, 2.5, -1.0)]


@pytest.mark.parametrize("op", UNARY_OPS, ids=lambda f: getattr(f, "__name__", "lambda"))
def test_unary_gradients(op):
    rng = np.random.default_rng(7)
    x = rand_tensor(rng, 4, 4)
    # keep away from relu/clamp/huber kinks
    x.values[np.abs(x.values) < 0.05] = 0.3
    x.values[np.abs(np.abs(x.values) - 1.0) < 0.05] += 0.2
    x.values[np.abs(np.abs(x.values) - 0.8) < 0.05] += 0.1
    err = ad.grad_check(lambda: op(x).sum(), [x], h=1e-4)
    assert err <= 1e-4, err


BINARY_OPS = [ad.add, ad.sub, ad.mul, ad.div, ad.matmul, ad.maximum, ad.minimum]


@pytest.mark.parametrize("op", BINARY_OPS, ids=lambda f: f.__name__)
def test_binary_gradients(op):
    rng = np.random.default_rng(8)
    a = rand_tensor(rng, 3, 3)
    b = rand_tensor(rng, 3, 3)
    b.values[np.abs(b.values) < 0.2] = 0.7  # keep div well-conditioned
    if op in (ad.maximum, ad.minimum):  # keep away from ties
        b.values += np.where(np.abs(a.values - b.values) < 0.05, 0.3, 0.0)
    err = ad.grad_check(lambda: op(a, b).sum(), [a, b], h=1e-4)
    assert err <= 1e-4, err


def test_log_sqrt_gradients():
    rng = np.random.default_rng(9)
    x = Tensor(rng.uniform(0.5, 3.0, (3, 3)), requires_grad=True)
    assert ad.grad_check(lambda: ad.log(x).sum(), [x], h=1e-4) <= 1e-4
    assert ad.grad_check(lambda: ad.sqrt(x).sum(), [x], h=1e-4) <= 1e-4


def test_structural_gradients():
    rng = np.random.default_rng(10)
    a, b = rand_tensor(rng, 2, 3), rand_tensor(rng, 2, 2)
    err = ad.grad_check(lambda: ad.concat_cols([a, b]).mean(), [a, b], h=1e-4)
    assert err <= 1e-4
    c, d = rand_tensor(rng, 2, 3), rand_tensor(rng, 3, 3)
    err = ad.grad_check(lambda: ad.concat_rows([c, d]).mean(), [c, d], h=1e-4)
    assert err <= 1e-4
    table = rand_tensor(rng, 5, 3)
    err = ad.grad_check(lambda: ad.embedding_rows(table, [0, 2, 2, 4]).sum(),
                        [table], h=1e-4)
    assert err <= 1e-4


def test_cosine_rows_gradient():
    rng = np.random.default_rng(11)
    keys = rand_tensor(rng, 3, 4)
    mat = rng.standard_normal((5, 4))
    err = ad.grad_check(lambda: ad.cosine_rows(keys, mat).sum(), [keys], h=1e-4)
    assert err <= 1e-4


def test_broadcast_gradients():
    rng = np.random.default_rng(12)
    x = rand_tensor(rng, 4, 3)
    row = rand_tensor(rng, 1, 3)
    col = rand_tensor(rng, 4, 1)
    scalar = rand_tensor(rng, 1, 1)
    for other in (row, col, scalar):
        err = ad.grad_check(lambda o=other: (x * o + o).sum(), [x, other], h=1e-4)
        assert err <= 1e-4


@given(st.integers(0, 2 ** 31 - 1), st.integers(2, 6))
@settings(max_examples=25, deadline=None)
def test_random_composition_gradients(seed, depth):
    """Random op chains of bounded depth keep analytic and numeric grads aligned."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(0.3, 1.5, (3, 3)), requires_grad=True)
    w = Tensor(rng.uniform(-0.8, 0.8, (3, 3)), requires_grad=True)

    def f():
        cur = x
        for i in range(depth):
            pick = (seed + i) % 5
            if pick == 0:
                cur = ad.sigmoid(cur @ w)
            elif pick == 1:
                cur = ad.tanh(cur + w)
            elif pick == 2:
                cur = ad.row_softmax(cur)
            elif pick == 3:
                cur = ad.softplus(cur * w)
            else:
                cur = cur @ w + cur
        return cur.mean()

    assert ad.grad_check(f, [x, w], h=1e-3) <= 1e-4


def test_determinism_same_seed_bit_identical():
    def run():
        rng = np.random.default_rng(123)
        x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        out = ad.row_softmax(ad.sigmoid(x @ w) @ w).sum()
        out.backward()
        return out.item(), x.grad.copy()

    (v1, g1), (v2, g2) = run(), run()
    assert v1 == v2
    assert np.array_equal(g1, g2)
