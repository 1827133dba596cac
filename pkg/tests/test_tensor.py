import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lora_dropout_lab.errors import ContractError, DimensionError, NumericalError
from lora_dropout_lab.tensor import (
    add,
    add_bias,
    backward,
    constant,
    elementwise,
    grad_check,
    hadamard,
    matmul,
    mean,
    parameter,
    relu,
    scale,
    softmax,
    softmax_cross_entropy,
    sub,
    sum_squares,
    transpose,
)

shapes = st.tuples(st.integers(1, 6), st.integers(1, 6))


def _weighted_sum(node, W):
    """Scalar ``sum(W * node)`` so every output entry gets a distinct adjoint."""
    ones_row = constant(np.ones((1, node.rows)))
    ones_col = constant(np.ones((node.cols, 1)))
    return matmul(matmul(ones_row, hadamard(node, constant(W))), ones_col)


class TestMatmul:
    def test_identity(self, rng):
        M = rng.normal(size=(2, 2))
        out = matmul(constant(np.eye(2)), constant(M))
        np.testing.assert_array_equal(out.value, M)

    def test_hand_product(self):
        out = matmul(constant([[1, 2], [3, 4]]), constant([[1], [1]]))
        np.testing.assert_array_equal(out.value, [[3], [7]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(3, 2\).*\(3, 2\)"):
            matmul(constant(np.ones((3, 2))), constant(np.ones((3, 2))))

    def test_adjoints(self, rng):
        a = parameter(rng.normal(size=(3, 4)))
        b = parameter(rng.normal(size=(4, 2)))
        G = rng.normal(size=(3, 2))
        backward(_weighted_sum(matmul(a, b), G))
        np.testing.assert_allclose(a.grad, G @ b.value.T, atol=1e-12)
        np.testing.assert_allclose(b.grad, a.value.T @ G, atol=1e-12)


class TestElementwise:
    def test_hadamard_with_ones(self, rng):
        M = rng.normal(size=(3, 5))
        np.testing.assert_array_equal(hadamard(constant(M), constant(np.ones((3, 5)))).value, M)

    def test_relu(self):
        np.testing.assert_array_equal(relu(constant([[-1, 2]])).value, [[0, 2]])

    def test_add_backward_passes_gradient_to_both(self, rng):
        a = parameter(rng.normal(size=(2, 3)))
        b = parameter(rng.normal(size=(2, 3)))
        G = rng.normal(size=(2, 3))
        backward(_weighted_sum(add(a, b), G))
        np.testing.assert_allclose(a.grad, G, atol=1e-14)
        np.testing.assert_allclose(b.grad, G, atol=1e-14)

    @pytest.mark.parametrize("kind", ["add", "sub", "hadamard"])
    def test_shape_mismatch(self, kind):
        with pytest.raises(DimensionError):
            elementwise(constant(np.ones((2, 2))), constant(np.ones((2, 3))), kind)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            elementwise(constant([[1.0]]), constant([[1.0]]), "divide")

    def test_fan_out_accumulates(self, rng):
        x = parameter(rng.normal(size=(2, 2)))
        y = add(hadamard(x, x), x)  # x feeds three edges
        backward(_weighted_sum(y, np.ones((2, 2))))
        np.testing.assert_allclose(x.grad, 2 * x.value + 1, atol=1e-14)


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss = softmax_cross_entropy(constant(np.zeros((3, 4))), [0, 1, 3])
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_saturated(self):
        loss = softmax_cross_entropy(constant([[10.0, -10.0]]), [0])
        assert loss.item() < 1e-6

    def test_matches_hand_logsumexp(self, rng):
        Z = rng.normal(size=(5, 3)) * 3
        y = rng.integers(0, 3, size=5)
        oracle = 0.0
        for row, label in zip(Z, y):
            m = max(row)
            lse = m + math.log(sum(math.exp(v - m) for v in row))
            oracle += lse - row[label]
        oracle /= 5
        assert softmax_cross_entropy(constant(Z), y).item() == pytest.approx(oracle, abs=1e-10)

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            softmax_cross_entropy(constant(np.zeros((2, 3))), [0, 3])

    def test_backward_is_softmax_minus_onehot(self, rng):
        Z = parameter(rng.normal(size=(4, 3)))
        y = np.array([0, 2, 1, 1])
        backward(softmax_cross_entropy(Z, y))
        expected = softmax(Z.value)
        expected[np.arange(4), y] -= 1
        np.testing.assert_allclose(Z.grad, expected / 4, atol=1e-14)

    def test_huge_logits_stay_finite(self):
        loss = softmax_cross_entropy(constant([[1000.0, 0.0, -1000.0]]), [1])
        assert loss.item() == pytest.approx(1000.0)

    @given(st.integers(0, 10_000), shapes)
    def test_softmax_rows_sum_to_one(self, seed, shape):
        Z = np.random.default_rng(seed).normal(size=shape) * 20
        np.testing.assert_allclose(softmax(Z).sum(axis=1), 1.0, atol=1e-12)


class TestBackward:
    def test_non_scalar_loss(self):
        with pytest.raises(ContractError):
            backward(parameter(np.ones((2, 2))))

    def test_frozen_leaf_gets_no_gradient(self, rng):
        W = constant(rng.normal(size=(3, 3)))
        x = parameter(rng.normal(size=(2, 3)))
        backward(sum_squares(matmul(x, W)))
        assert not np.any(W.grad)

    def test_repeated_backward_is_bit_identical(self, rng):
        a = parameter(rng.normal(size=(3, 3)))
        grads = []
        for _ in range(2):
            a.grad = np.zeros_like(a.value)
            backward(sum_squares(relu(matmul(a, transpose(a)))))
            grads.append(a.grad.copy())
        assert np.array_equal(grads[0], grads[1])

    def test_non_finite_result(self):
        with np.errstate(over="ignore"), pytest.raises(NumericalError):
            scale(constant([[1e308]]), 10.0)

    def test_mean_reduces_in_order(self, rng):
        nodes = [parameter(rng.normal(size=(1, 1))) for _ in range(3)]
        m = mean(nodes)
        assert m.item() == pytest.approx(sum(n.item() for n in nodes) / 3)
        backward(m)
        for n in nodes:
            assert n.grad[0, 0] == pytest.approx(1 / 3)

    def test_mean_of_nothing(self):
        with pytest.raises(ContractError):
            mean([])


class TestGradCheck:
    def test_quadratic(self, rng):
        theta = parameter(rng.normal(size=(4, 1)))
        backward(scale(sum_squares(theta), 0.5))
        np.testing.assert_allclose(theta.grad, theta.value, atol=1e-15)
        assert grad_check(lambda: scale(sum_squares(theta), 0.5), [theta]) < 1e-7

    def test_affine_is_exact(self, rng):
        theta = parameter(rng.normal(size=(1, 3)))
        c = constant(rng.normal(size=(3, 1)))
        assert grad_check(lambda: matmul(theta, c), [theta]) < 1e-8

    def test_rejects_bad_step(self):
        theta = parameter([[1.0]])
        with pytest.raises(ContractError):
            grad_check(lambda: sum_squares(theta), [theta], eps=0)

    def test_restores_values(self, rng):
        theta = parameter(rng.normal(size=(2, 2)))
        before = theta.value.copy()
        grad_check(lambda: sum_squares(relu(theta)), [theta])
        assert np.array_equal(before, theta.value)

    @given(st.integers(0, 10_000), shapes, st.integers(1, 5))
    def test_primitives_on_random_inputs(self, seed, shape, k):
        g = np.random.default_rng(seed)
        rows, cols = shape
        a = parameter(g.normal(size=(rows, cols)))
        b = parameter(g.normal(size=(cols, k)))
        c = parameter(g.normal(size=(rows, k)))
        bias = parameter(g.normal(size=(1, k)))
        y = g.integers(0, k, size=rows) if k > 1 else np.zeros(rows, dtype=int)

        def f():
            h = add_bias(matmul(a, b), bias)
            h = sub(add(h, hadamard(c, c)), scale(c, 0.3))
            return add(softmax_cross_entropy(h, y), scale(sum_squares(transpose(c)), 0.1))

        assert grad_check(f, [a, b, c, bias], eps=1e-4) < 1e-4
