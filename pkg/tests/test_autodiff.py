import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qops import autodiff as ad
from qops.autodiff import Tensor


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]))
        assert out.data.tolist() == [[1, 2], [3, 4]]

    def test_scalar(self):
        assert ad.matmul(Tensor([[2]]), Tensor([[3]])).data.tolist() == [[6]]

    def test_hand_expanded(self):
        out = ad.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
        assert out.data.tolist() == [[19, 22], [43, 50]]

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ad.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_triple_loop(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
        np.testing.assert_allclose(ad.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-12)

    def test_backward_rule(self):
        rng = np.random.default_rng(1)
        A = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        B = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        ad.backward(ad.total(A @ B))
        G = np.ones((2, 4))
        np.testing.assert_allclose(A.grad, G @ B.data.T)
        np.testing.assert_allclose(B.grad, A.data.T @ G)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(ad.softmax(Tensor([2.0, 2.0])).data, [[0.5, 0.5]])

    def test_closed_form(self):
        np.testing.assert_allclose(ad.softmax(Tensor([0.0, math.log(3)])).data, [[0.25, 0.75]], atol=1e-15)

    def test_empty_is_domain_error(self):
        with pytest.raises(ad.DimensionError):
            ad.softmax(Tensor(np.zeros((1, 0))))

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=20), st.floats(-50, 50))
    def test_normalized_and_shift_invariant(self, values, c):
        p = ad.softmax(Tensor(values)).data
        assert p.min() >= 0
        assert abs(p.sum() - 1.0) <= 1e-12
        shifted = ad.softmax(Tensor(np.array(values) + c)).data
        np.testing.assert_allclose(shifted, p, atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(1, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(5, 1)))
        err = ad.grad_check(lambda: ad.softmax(x) @ w, [x])
        assert err < 1e-6


class TestElementwise:
    def test_tanh_at_zero(self):
        x = Tensor([[0.0]], requires_grad=True)
        y = ad.elementwise("tanh", x)
        ad.backward(y)
        assert y.item() == 0.0 and x.grad[0, 0] == 1.0

    def test_sigmoid_at_zero(self):
        assert ad.elementwise("sigmoid", Tensor([[0.0]])).item() == 0.5

    def test_sigmoid_extremes_are_finite(self):
        y = ad.sigmoid(Tensor([[-800.0, 800.0]])).data
        assert np.all(np.isfinite(y)) and y[0, 0] == 0.0 and y[0, 1] == 1.0

    def test_add(self):
        assert ad.elementwise("add", Tensor([1, 2]), Tensor([3, 4])).data.tolist() == [[4, 6]]

    def test_shape_mismatch(self):
        with pytest.raises(ad.DimensionError):
            ad.elementwise("mul", Tensor([1, 2]), Tensor([1, 2, 3]))

    def test_log_domain(self):
        with pytest.raises(ad.DomainError):
            ad.log(Tensor([[1.0, 0.0]]))

    @pytest.mark.parametrize("kind", ["tanh", "sigmoid", "log"])
    def test_unary_gradients(self, kind):
        x = Tensor(np.array([[0.3, 1.2, 2.5]]), requires_grad=True)
        assert ad.grad_check(lambda: ad.total(ad.elementwise(kind, x)), [x]) < 1e-6


class TestConcatAndLookup:
    def test_single_part_is_identity(self):
        a = Tensor([[1.0, 2.0]])
        assert ad.concat([a]) is a

    def test_values(self):
        assert ad.concat([Tensor([[1, 2]]), Tensor([[3]])]).data.tolist() == [[1, 2, 3]]

    def test_output_layer_input_widths(self):
        # ex2 decoder output layer: op embedding 4 + context 10 + state 12
        parts = [Tensor(np.zeros((1, w))) for w in (4, 10, 12)]
        assert ad.concat(parts).shape == (1, 26)
        assert ad.concat([Tensor(np.zeros((1, w))) for w in (3, 3, 12)]).shape == (1, 18)

    def test_empty(self):
        with pytest.raises(ad.DomainError):
            ad.concat([])

    def test_backward_splits(self):
        a = Tensor([[1.0, 2.0]], requires_grad=True)
        b = Tensor([[3.0]], requires_grad=True)
        w = Tensor([[1.0], [2.0], [3.0]])
        ad.backward(ad.concat([a, b]) @ w)
        assert a.grad.tolist() == [[1.0, 2.0]] and b.grad.tolist() == [[3.0]]

    def test_lookup_row(self):
        assert ad.embedding_lookup(Tensor(np.eye(3)), 1).data.tolist() == [[0, 1, 0]]

    def test_lookup_twice_sums_gradient(self):
        table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        y = ad.embedding_lookup(table, 2) + ad.embedding_lookup(table, 2)
        ad.backward(ad.total(y))
        assert table.grad.tolist() == [[0, 0], [0, 0], [2, 2]]

    def test_lookup_out_of_range(self):
        with pytest.raises(IndexError):
            ad.embedding_lookup(Tensor(np.eye(3)), 3)


class TestBackward:
    def test_square(self):
        x = Tensor([[3.0]], requires_grad=True)
        ad.backward(ad.mul(x, x))
        assert x.grad[0, 0] == 6.0

    def test_sum_tanh_at_zero(self):
        x = Tensor(np.zeros((1, 4)), requires_grad=True)
        ad.backward(ad.total(ad.tanh(x)))
        assert x.grad.tolist() == [[1.0] * 4]

    def test_non_scalar_rejected(self):
        x = Tensor([[1.0, 2.0]], requires_grad=True)
        with pytest.raises(ad.DomainError):
            ad.backward(ad.tanh(x))

    def test_shared_use_sums_both_paths(self):
        x0 = np.array([[0.7, -1.3]])
        x = Tensor(x0, requires_grad=True)
        ad.backward(ad.total(ad.mul(x, ad.tanh(x))))
        t = np.tanh(x0)
        np.testing.assert_allclose(x.grad, t + x0 * (1 - t * t), atol=1e-15)

    def test_repeated_backward_requires_reset(self):
        x = Tensor([[2.0]], requires_grad=True)
        ad.backward(ad.mul(x, x))
        with pytest.raises(ad.GradientError):
            ad.backward(ad.mul(x, x))
        ad.backward(ad.mul(x, x), accumulate=True)
        assert x.grad[0, 0] == 8.0
        ad.zero_grad([x])
        ad.backward(ad.mul(x, x))
        assert x.grad[0, 0] == 4.0

    def test_tape_is_topological_and_visits_once(self):
        x = Tensor([[0.5]], requires_grad=True)
        y = ad.tanh(x)
        z = ad.mul(y, y) + y
        tape = ad.Tape.from_loss(z)
        seen = set()
        for op in tape.ops:
            for t in op.inputs:
                assert t._op is None or id(t._op) in seen
            seen.add(id(op))
        assert len(seen) == len(tape.ops) == 3

    def test_no_grad_records_nothing(self):
        x = Tensor([[1.0]], requires_grad=True)
        with ad.no_grad():
            y = ad.tanh(x)
        assert y._op is None and not y.requires_grad


class TestGradCheck:
    def test_square(self):
        x = Tensor([[3.0]], requires_grad=True)
        assert ad.grad_check(lambda: ad.mul(x, x), [x], 1e-4) < 1e-6

    def test_eps_range(self):
        x = Tensor([[3.0]], requires_grad=True)
        with pytest.raises(ad.DomainError):
            ad.grad_check(lambda: ad.mul(x, x), [x], 1e-2)

    def test_nondeterministic_objective_detected(self):
        x = Tensor([[1.0]], requires_grad=True)
        rng = np.random.default_rng(0)
        with pytest.raises(ad.GradientError):
            ad.grad_check(lambda: ad.scale(x, float(rng.random())), [x])

    def test_restores_parameters(self):
        x = Tensor([[0.3, -0.2]], requires_grad=True)
        before = x.data.copy()
        ad.grad_check(lambda: ad.total(ad.tanh(x)), [x])
        assert np.array_equal(x.data, before)

    def test_composite_expression(self):
        rng = np.random.default_rng(3)
        W = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        v = Tensor(rng.normal(size=(4, 1)), requires_grad=True)
        x = Tensor(rng.normal(size=(1, 3)))

        def f():
            h = ad.tanh(x @ W)
            return ad.log(ad.pick(ad.softmax(ad.concat([h @ v, ad.sigmoid(h @ v)])), 0, 1))

        assert ad.grad_check(f, [W, v]) < 1e-4
