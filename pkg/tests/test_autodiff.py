"""Gradient and semantics checks for the tensor engine."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from markov_scale_gen.autodiff import (
    NumericError,
    Parameter,
    ShapeError,
    Tensor,
    add,
    concat,
    conv2d,
    cross_entropy,
    dropout,
    embedding_lookup,
    finite_diff_check,
    layer_norm,
    matmul,
    mean,
    moveaxis,
    mul,
    narrow,
    neg,
    no_grad,
    primitive_set,
    reshape,
    resize_array,
    resize_grid,
    silu,
    softmax,
    stop_gradient,
    sub,
    sum_,
    swap_last,
)


def _param(rng, shape, name="p"):
    return Parameter(rng.normal(size=shape), name=name)


def check(f, params, tol=1e-6):
    err = finite_diff_check(f, params)
    assert err < tol, f"finite-difference mismatch {err:.3e}"


class TestElementwiseGrads:
    def test_add_broadcast(self, rng):
        a = _param(rng, (3, 4))
        b = _param(rng, (4,))
        check(lambda: sum_(mul(add(a, b), add(a, b))), [a, b])

    def test_sub_and_neg(self, rng):
        a = _param(rng, (2, 5))
        b = _param(rng, (2, 5))
        check(lambda: sum_(mul(sub(a, b), neg(b))), [a, b])

    def test_mul_broadcast(self, rng):
        a = _param(rng, (2, 1, 4))
        b = _param(rng, (3, 4))
        check(lambda: sum_(mul(a, b)), [a, b])

    def test_silu(self, rng):
        a = _param(rng, (6,))
        check(lambda: sum_(silu(a)), [a])

    def test_mean_axis(self, rng):
        a = _param(rng, (3, 5))
        check(lambda: sum_(mul(mean(a, axis=1), mean(a, axis=1))), [a])


class TestShapeOpGrads:
    def test_reshape_moveaxis_swap(self, rng):
        a = _param(rng, (2, 3, 4))
        def f():
            x = reshape(a, (6, 4))
            x = swap_last(reshape(x, (2, 3, 4)))
            x = moveaxis(x, 0, 1)
            return sum_(mul(x, x))
        check(f, [a])

    def test_narrow_concat(self, rng):
        a = _param(rng, (5, 4))
        b = _param(rng, (2, 4))
        def f():
            x = concat([narrow(a, 0, 1, 3), b], axis=0)
            return sum_(mul(x, x))
        check(f, [a, b])

    def test_narrow_bounds(self):
        with pytest.raises(ShapeError):
            narrow(Tensor(np.zeros((3, 3))), 0, 2, 5)


class TestLinearAlgebraGrads:
    @pytest.mark.parametrize(
        "ashape,bshape",
        [((4, 5), (5, 3)), ((2, 4, 5), (5, 3)), ((2, 3, 4, 5), (5, 2)), ((2, 1, 4, 5), (3, 5, 6))],
    )
    def test_matmul_variants(self, rng, ashape, bshape):
        a = _param(rng, ashape)
        b = _param(rng, bshape)
        def f():
            y = matmul(a, b)
            return sum_(mul(y, y))
        check(f, [a, b])

    def test_matmul_shape_errors(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2))))
        with pytest.raises(ShapeError):
            matmul(Tensor(np.zeros(4)), Tensor(np.zeros((4, 2))))

    def test_softmax_grad(self, rng):
        a = _param(rng, (3, 6))
        w = rng.normal(size=(3, 6))
        check(lambda: sum_(mul(softmax(a), Tensor(w))), [a])

    def test_layer_norm_grad(self, rng):
        a = _param(rng, (4, 8))
        g = _param(rng, (8,))
        b = _param(rng, (8,))
        check(lambda: sum_(mul(layer_norm(a, g, b), layer_norm(a, g, b))), [a, g, b], tol=1e-5)

    def test_embedding_grad(self, rng):
        table = _param(rng, (7, 4))
        idx = np.array([[1, 2], [6, 1]])
        check(lambda: sum_(mul(embedding_lookup(table, idx), embedding_lookup(table, idx))), [table])

    def test_cross_entropy_grad(self, rng):
        logits = _param(rng, (5, 7))
        targets = np.array([0, 3, 6, 1, 1])
        check(lambda: cross_entropy(logits, targets), [logits])

    def test_cross_entropy_uniform_value(self):
        logits = Tensor(np.zeros((4, 9)))
        out = cross_entropy(logits, np.array([0, 1, 2, 3]))
        assert out.item() == pytest.approx(np.log(9), abs=1e-12)


class TestResizeAndConv:
    def test_resize_grid_grad(self, rng):
        a = _param(rng, (3, 3, 2))
        check(lambda: sum_(mul(resize_grid(a, 5), resize_grid(a, 5))), [a])

    def test_resize_array_matches_tensor_path(self, rng):
        x = rng.normal(size=(4, 4, 3))
        for kernel in ("bilinear", "nearest"):
            got = resize_grid(Tensor(x), 7, kernel).data
            want = resize_array(x, 7, kernel)
            assert np.array_equal(got, want)

    def test_resize_batched_consistency(self, rng):
        x = rng.normal(size=(3, 4, 4, 2))
        batched = resize_array(x, 6)
        per_item = np.stack([resize_array(x[i], 6) for i in range(3)])
        assert np.allclose(batched, per_item, atol=1e-15)

    def test_resize_identity(self, rng):
        x = rng.normal(size=(5, 5, 3))
        for kernel in ("bilinear", "nearest"):
            assert np.allclose(resize_array(x, 5, kernel), x, atol=1e-15)

    def test_nearest_down_is_block_mean(self, rng):
        # divisible downsizing averages each block, which is what makes the
        # tokenizer's error-monotonicity argument go through
        x = rng.normal(size=(4, 4, 1))
        down = resize_array(x, 2, "nearest")
        want = x.reshape(2, 2, 2, 2, 1).mean(axis=(1, 3))
        assert np.allclose(down, want, atol=1e-14)

    def test_conv2d_grad(self, rng):
        x = _param(rng, (2, 5, 5, 3))
        w = _param(rng, (3, 3, 3, 4))
        b = _param(rng, (4,))
        def f():
            y = conv2d(x, w, b, stride=2, padding=1)
            return sum_(mul(y, y))
        check(f, [x, w, b], tol=1e-5)

    def test_unknown_kernel(self):
        with pytest.raises(ValueError):
            resize_array(np.zeros((2, 2, 1)), 4, "bicubic")


class TestSemantics:
    def test_softmax_neg_inf_exact_zero(self):
        logits = np.array([[0.0, -np.inf, 1.0]])
        out = softmax(Tensor(logits)).data
        assert out[0, 1] == 0.0
        assert out.sum() == pytest.approx(1.0, abs=1e-15)

    def test_no_grad_blocks_tape(self, rng):
        a = _param(rng, (3,))
        with no_grad():
            out = sum_(mul(a, a))
        assert out._backward is None and out._parents == ()

    def test_stop_gradient(self, rng):
        a = _param(rng, (3,))
        out = sum_(mul(a, stop_gradient(a)))
        out.backward()
        # d/da of a * sg(a) treats the second factor as constant
        assert np.allclose(a.grad, a.data)

    def test_dropout_train_and_scale(self, rng):
        a = Tensor(np.ones((1000,)), requires_grad=True)
        out = dropout(a, 0.25, np.random.default_rng(3))
        kept = out.data != 0.0
        assert 0.6 < kept.mean() < 0.9
        assert np.allclose(out.data[kept], 1.0 / 0.75)

    def test_backward_requires_scalar(self, rng):
        a = _param(rng, (3,))
        with pytest.raises(ShapeError):
            mul(a, a).backward()

    def test_backward_accumulates_shared_parent(self, rng):
        a = _param(rng, (4,))
        out = sum_(add(mul(a, a), mul(a, a)))
        out.backward()
        assert np.allclose(a.grad, 4 * a.data)

    def test_grad_buffers_never_alias(self, rng):
        a = _param(rng, (3, 4))
        b = _param(rng, (3, 4))
        sum_(add(a, b)).backward()
        assert a.grad is not b.grad
        a.grad[0, 0] = 99.0
        assert b.grad[0, 0] != 99.0

    def test_primitive_set_is_complete(self):
        prims = primitive_set()
        assert set(prims) == {
            "matmul", "add", "mul", "softmax", "layer_norm",
            "embedding_lookup", "concat", "resize_grid", "cross_entropy",
        }
        assert all(callable(v) for v in prims.values())

    def test_broadcast_mismatch_raises(self):
        with pytest.raises(ShapeError):
            add(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 4))))


@settings(max_examples=40, deadline=None)
@given(
    rows=st.integers(1, 4),
    cols=st.integers(1, 4),
    seed=st.integers(0, 10_000),
)
def test_mul_grad_property(rows, cols, seed):
    r = np.random.default_rng(seed)
    a = Parameter(r.normal(size=(rows, cols)), name="a")
    b = Parameter(r.normal(size=(cols,)), name="b")
    out = sum_(mul(a, b))
    out.backward()
    assert np.allclose(a.grad, np.broadcast_to(b.data, (rows, cols)))
    assert np.allclose(b.grad, a.data.sum(axis=0))


def test_finite_diff_check_rejects_nonscalar(rng):
    a = _param(rng, (2, 2))
    with pytest.raises(ShapeError):
        finite_diff_check(lambda: mul(a, a), [a])


def test_finite_diff_check_flags_nonfinite():
    a = Parameter(np.array([0.0]), name="a")

    def f():
        return sum_(mul(a, Tensor(np.array([np.inf]))))

    with np.errstate(invalid="ignore"):
        with pytest.raises(NumericError):
            finite_diff_check(f, [a])
