import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condgan import tensor as T
from condgan.tensor import Tensor, backward, concat, conv2d, deconv2d, grad_check, hadamard, matmul

from oracles import conv2d_loops, deconv2d_loops, matmul_loops


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# -- matmul -----------------------------------------------------------------------

class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor([[1.0, 0], [0, 1]]), Tensor([[5.0, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])

    def test_row_by_column(self):
        assert matmul(Tensor([[1.0, 2]]), Tensor([[3.0], [4]])).data.tolist() == [[11.0]]

    def test_matches_triple_loop(self, rng):
        a, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 5))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, matmul_loops(a, b), atol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# -- conv2d / deconv2d ----------------------------------------------------------------

class TestConv2d:
    def test_sum_of_ones(self):
        out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), 1, 0)
        assert out.shape == (1, 1, 1, 1) and out.data[0, 0, 0, 0] == 9

    def test_delta_kernel_is_identity(self, rng):
        x = rng.standard_normal((2, 1, 5, 6))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1
        np.testing.assert_array_equal(conv2d(Tensor(x), Tensor(k), 1, 1).data, x)

    def test_matches_loops(self, rng):
        x, w = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3))
        np.testing.assert_allclose(conv2d(Tensor(x), Tensor(w), 2, 1).data, conv2d_loops(x, w, 2, 1), atol=1e-10)

    def test_non_positive_extent(self):
        with pytest.raises(T.ShapeError):
            conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))), 1, 0)

    def test_channel_mismatch(self):
        with pytest.raises(T.ShapeError):
            conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


class TestDeconv2d:
    def test_single_pixel_broadcast(self):
        k = np.array([[[[1.0, 2], [3, 4]]]])
        out = deconv2d(Tensor([[[[2.5]]]]), Tensor(k), 1, 0)
        np.testing.assert_array_equal(out.data, 2.5 * k)

    def test_stride_two_scatter(self):
        out = deconv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 1, 1))), 2, 0)
        expect = np.zeros((3, 3))
        expect[::2, ::2] = 1
        np.testing.assert_array_equal(out.data[0, 0], expect)

    def test_equals_conv_input_gradient(self, rng):
        # deconv2d(x) is what conv2d's backward hands its input for upstream grad x
        w = rng.standard_normal((3, 2, 4, 4))
        inp = leaf(rng.standard_normal((2, 2, 8, 8)))
        y = conv2d(inp, Tensor(w), 2, 1)
        up = rng.standard_normal(y.shape)
        (g,) = backward((y * Tensor(up)).sum(), [inp])
        np.testing.assert_allclose(deconv2d(Tensor(up), Tensor(w), 2, 1).data, g, atol=1e-12)

    def test_matches_loops(self, rng):
        x, w = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((3, 2, 4, 4))
        np.testing.assert_allclose(deconv2d(Tensor(x), Tensor(w), 2, 1).data, deconv2d_loops(x, w, 2, 1),
                                   atol=1e-10)

    def test_bad_geometry(self):
        with pytest.raises(T.ShapeError):
            deconv2d(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((1, 1, 2, 2))), 1, 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 2), st.integers(1, 4), st.integers(0, 2),
       st.integers(1, 3), st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_adjoint_identity(n, c, f, k, pad, stride, out_hw, seed):
    # <conv(a, w), b> == <a, deconv(b, w)> when a has the deconv output extent
    h = (out_hw - 1) * stride - 2 * pad + k
    if h < 1 or k > h + 2 * pad:
        return
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, c, h, h))
    w = rng.standard_normal((f, c, k, k))
    b = rng.standard_normal((n, f, out_hw, out_hw))
    lhs = np.sum(conv2d(Tensor(a), Tensor(w), stride, pad).data * b)
    rhs = np.sum(a * deconv2d(Tensor(b), Tensor(w), stride, pad).data)
    assert abs(lhs - rhs) <= 1e-8 * max(1.0, abs(lhs))


# -- hadamard / concat ------------------------------------------------------------------

class TestHadamard:
    def test_annihilator(self):
        assert hadamard(Tensor([1.0, 2, 3]), Tensor([0.0, 0, 0])).data.tolist() == [0, 0, 0]

    def test_values(self):
        assert hadamard(Tensor([1.0, 2]), Tensor([5.0, 7])).data.tolist() == [5, 14]

    def test_gradient_is_other_operand(self, rng):
        a, b = leaf(rng.standard_normal(5)), Tensor(rng.standard_normal(5))
        (g,) = backward(hadamard(a, b).sum(), [a])
        np.testing.assert_array_equal(g, b.data)

    def test_no_broadcasting(self):
        with pytest.raises(T.ShapeError):
            hadamard(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


class TestConcat:
    def test_order(self):
        assert concat([Tensor([1.0, 2]), Tensor([3.0])], 0).data.tolist() == [1, 2, 3]

    def test_single_part(self):
        t = Tensor([4.0, 5])
        assert concat([t], 0) is t

    def test_backward_slices_back_to_parts(self, rng):
        parts = [leaf(rng.standard_normal((2, s))) for s in (1, 3, 2)]
        weights = rng.standard_normal((2, 6))
        grads = backward((concat(parts, 1) * Tensor(weights)).sum(), parts)
        for g, p, sl in zip(grads, parts, (slice(0, 1), slice(1, 4), slice(4, 6))):
            assert g.shape == p.shape
            np.testing.assert_array_equal(g, weights[:, sl])

    def test_errors(self):
        with pytest.raises(T.ShapeError):
            concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 3)))], 1)
        with pytest.raises(T.ShapeError):
            concat([Tensor(np.ones(2))], 3)


# -- backward -----------------------------------------------------------------------------

class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = leaf(rng.standard_normal((3, 4)))
        (g,) = backward(x.sum(), [x])
        np.testing.assert_array_equal(g, np.ones((3, 4)))

    def test_square(self, rng):
        x = leaf(rng.standard_normal(6))
        (g,) = backward((x * x).sum(), [x])
        np.testing.assert_allclose(g, 2 * x.data)

    def test_unreachable_leaf_gets_zero(self):
        a, b = leaf([1.0, 2.0]), leaf([3.0, 4.0])
        ga, gb = backward((a * a).sum(), [a, b])
        assert np.all(gb == 0) and gb.shape == (2,)

    def test_non_scalar_loss(self):
        with pytest.raises(T.ShapeError):
            backward(leaf([1.0, 2.0]) * 2.0)

    def test_leaf_grad_accumulates_without_params(self):
        x = leaf([1.0, 2.0])
        backward((x * 3.0).sum())
        np.testing.assert_array_equal(x.grad, [3.0, 3.0])

    def test_diamond_visits_each_node_once(self, rng):
        x = leaf(rng.standard_normal(4))
        y = x * 2.0
        loss = (y * y + y).sum()
        order = T.topological_order(loss)
        assert len(order) == len({id(n) for n in order})
        pos = {id(n): i for i, n in enumerate(order)}
        for node in order:
            for p in node._parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(node)]
        (g,) = backward(loss, [x])
        np.testing.assert_allclose(g, 2 * (2 * y.data + 1))

    def test_forward_nan_names_op(self):
        with pytest.raises(T.NumericError, match="log"):
            T.log(Tensor([-1.0]))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_backward_nan_names_op(self):
        x = leaf([0.0])
        y = T.sqrt(x)  # finite forward, infinite derivative at 0
        with pytest.raises(T.NumericError, match="sqrt.*backward"):
            backward(y.sum(), [x])

    def test_no_grad_builds_no_graph(self):
        x = leaf([1.0])
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_composite_matches_finite_differences(self, rng):
        w = Tensor(rng.standard_normal((2, 3, 3, 3)))
        def f(x):
            y = conv2d(x, w, 1, 1).tanh()
            return (y * y).mean() + T.sigmoid(x).sum() * 0.1
        rep = grad_check(f, rng.standard_normal((1, 3, 4, 4)))
        assert rep.passed, rep.max_rel_error


# -- grad_check -----------------------------------------------------------------------------

class TestGradCheck:
    def test_sum_is_exact(self, rng):
        rep = grad_check(lambda x: x.sum(), rng.standard_normal((3, 3)))
        assert rep.max_rel_error < 1e-9

    def test_tanh(self, rng):
        assert grad_check(lambda x: x.tanh().sum(), rng.standard_normal(10), tol=1e-4).passed

    def test_wrong_backward_fails(self, rng):
        def bad_square(x):
            return T._node(x.data ** 2, (x,), lambda g: (g * x.data,), "bad_square").sum()
        assert not grad_check(bad_square, rng.standard_normal(5) + 2.0).passed

    def test_non_deterministic_function(self, rng):
        noise = np.random.default_rng(0)
        with pytest.raises(T.DeterminismError):
            grad_check(lambda x: (x * float(noise.standard_normal())).sum(), np.ones(3))

    def test_rejects_non_positive_step(self):
        with pytest.raises(ValueError):
            grad_check(lambda x: x.sum(), np.ones(2), h=0.0)


OPS = {
    "add": lambda x, o: (x + o).sum(),
    "sub": lambda x, o: (o - x).sum(),
    "mul_broadcast": lambda x, o: (x * o[:1]).sum(),
    "div": lambda x, o: (x / (o * o + 1.0)).sum() + (o / (x * x + 1.0)).sum(),
    "pow": lambda x, o: ((x * x + 1.0) ** 1.5).sum(),
    "exp_log": lambda x, o: T.log(T.exp(x) + 1.0).sum(),
    "sqrt": lambda x, o: T.sqrt(x * x + 0.5).sum(),
    "tanh": lambda x, o: (x.tanh() * o).sum(),
    "sigmoid": lambda x, o: (T.sigmoid(x) * o).sum(),
    "relu": lambda x, o: (T.relu(x) * o).sum(),
    "leaky_relu": lambda x, o: (T.leaky_relu(x, 0.2) * o).sum(),
    "clip": lambda x, o: (T.clip(x, -0.5, 0.5) * o).sum(),
    "mean_axis": lambda x, o: (x.mean(axis=1, keepdims=True) * o[:, :1]).sum(),
    "sum_axis": lambda x, o: (x.sum(axis=0) * o[0]).sum(),
    "reshape_transpose": lambda x, o: (x.reshape(-1).reshape(x.shape[1], x.shape[0]).T * o).sum(),
    "index": lambda x, o: (x[1:, ::2] * o[1:, ::2]).sum(),
    "matmul": lambda x, o: matmul(x, o.T).tanh().sum(),
    "hadamard": lambda x, o: (hadamard(x, o) * x).sum(),
    "concat": lambda x, o: (concat([x, o, x], 1) ** 2).sum(),
    "dropout": lambda x, o: (T.dropout(x, 0.5, np.random.default_rng(3)) * o).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name, rng):
    other = Tensor(rng.standard_normal((3, 4)))
    x0 = rng.standard_normal((3, 4))
    if name in ("relu", "leaky_relu", "clip"):
        x0 = np.where(np.abs(x0) < 0.05, 0.3, x0)  # keep away from kinks
        if name == "clip":
            x0 = np.where(np.abs(np.abs(x0) - 0.5) < 0.05, 0.2, x0)
    rep = grad_check(lambda x: OPS[name](x, other), x0, h=1e-5, tol=1e-4)
    assert rep.passed, (name, rep.max_rel_error)


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 4), (2, 0, 2), (1, 1, 3)])
def test_conv_family_gradients(stride, pad, k, rng):
    w = rng.standard_normal((2, 2, k, k))
    x = rng.standard_normal((1, 2, 5, 5))
    up = Tensor(rng.standard_normal(conv2d(Tensor(x), Tensor(w), stride, pad).shape))
    assert grad_check(lambda t: (conv2d(t, Tensor(w), stride, pad) * up).sum(), x).passed
    assert grad_check(lambda t: (conv2d(Tensor(x), t, stride, pad) * up).sum(), w).passed

    xd = rng.standard_normal((1, 2, 3, 3))
    upd = Tensor(rng.standard_normal(deconv2d(Tensor(xd), Tensor(w), stride, pad).shape))
    assert grad_check(lambda t: (deconv2d(t, Tensor(w), stride, pad) * upd).sum(), xd).passed
    assert grad_check(lambda t: (deconv2d(Tensor(xd), t, stride, pad) * upd).sum(), w).passed


def test_float32_stays_float32():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    y = (x * 2.0 + 1.0).mean()
    assert y.dtype == np.float32
    (g,) = backward(y, [x])
    assert g.dtype == np.float32
