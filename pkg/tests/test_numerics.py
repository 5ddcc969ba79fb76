import math

import numpy as np
import pytest

from tmfusion import numerics as nx
from tmfusion.errors import ContractError, DimensionError, DomainError
from tmfusion.numerics import Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(nx.matmul(np.eye(2), a).data, a)

    def test_row_times_column(self):
        assert nx.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            nx.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_gradient_of_sum(self):
        rng = np.random.default_rng(0)
        b = rng.normal(size=(3, 3))
        report = nx.grad_check(lambda a: nx.tsum(nx.matmul(a, b)), [rng.normal(size=(3, 3))])
        assert report.passed and report.worst_error < 1e-4

    def test_adjoints(self):
        rng = np.random.default_rng(1)
        a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(3, 4)))
        dc = rng.normal(size=(2, 4))
        nx.backward(nx.tsum(nx.matmul(a, b) * dc))
        np.testing.assert_allclose(a.grad, dc @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ dc)


class TestElementwise:
    def test_relu(self):
        assert nx.relu([-1.0, 0.0, 2.0]).data.tolist() == [0.0, 0.0, 2.0]

    def test_relu_subgradient_at_zero(self):
        x = leaf([0.0, 1.0, -1.0])
        nx.backward(nx.tsum(nx.relu(x)))
        assert x.grad.tolist() == [0.0, 1.0, 0.0]

    def test_sigmoid_zero(self):
        assert nx.sigmoid(0.0).item() == 0.5

    def test_tanh_gradient(self):
        report = nx.grad_check(lambda x: nx.tsum(nx.tanh(x)), [np.array([0.3, -0.7])])
        assert report.passed

    def test_log_domain(self):
        with pytest.raises(DomainError):
            nx.log([1.0, 0.0])
        with pytest.raises(DomainError):
            nx.log([-2.0])

    def test_dispatcher(self):
        x = np.array([0.5, -0.25])
        np.testing.assert_allclose(nx.elementwise("exp", x).data, np.exp(x))
        np.testing.assert_allclose(nx.elementwise("scale", x, 3.0).data, 3.0 * x)
        np.testing.assert_allclose(nx.elementwise("mul", x, x).data, x * x)

    def test_incompatible_broadcast(self):
        with pytest.raises(DimensionError):
            nx.add(np.ones((2, 3)), np.ones((3, 2)))

    @pytest.mark.parametrize("op", ["add", "mul", "relu", "sigmoid", "tanh", "exp", "log", "scale"])
    def test_every_primitive_over_seeds(self, op):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            x = rng.uniform(0.2, 2.0, size=(2, 3)) if op == "log" else rng.normal(size=(2, 3))
            if op == "relu":
                x = np.where(np.abs(x) < 1e-3, 0.5, x)  # keep clear of the kink
            y = rng.normal(size=(2, 3))
            if op in ("add", "mul"):
                fn, point = (lambda a, b: nx.tsum(nx.elementwise(op, a, b) * y)), [x, rng.normal(size=(2, 3))]
            elif op == "scale":
                fn, point = (lambda a: nx.tsum(nx.elementwise(op, a, 1.7) * y)), [x]
            else:
                fn, point = (lambda a: nx.tsum(nx.elementwise(op, a) * y)), [x]
            report = nx.grad_check(fn, point)
            assert report.passed, (op, seed, report.worst_error)


class TestSoftmax:
    def test_equal_logits(self):
        np.testing.assert_allclose(nx.softmax(np.zeros(7)).data, np.full(7, 1 / 7), rtol=0, atol=1e-15)

    def test_no_overflow(self):
        p = nx.softmax([1000.0, 0.0]).data
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p, [1.0, 0.0], atol=1e-300)

    def test_against_high_precision(self):
        # 50-digit decimal evaluation of exp(k) / sum exp(k)
        expected = [0.090030573170380457998, 0.24472847105479765247, 0.66524095577482188953]
        np.testing.assert_allclose(nx.softmax([1.0, 2.0, 3.0]).data, expected, rtol=0, atol=1e-9)

    def test_shift_invariance_and_normalisation(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            z = rng.normal(scale=5, size=9)
            p = nx.softmax(z).data
            assert abs(p.sum() - 1) < 1e-6 and np.all(p > 0)
            np.testing.assert_allclose(nx.softmax(z + 123.4).data, p, atol=1e-6)


class TestCrossEntropy:
    def test_uniform_is_log7(self):
        p = nx.softmax(np.zeros(7))
        for target in range(7):
            assert nx.cross_entropy(p, target).item() == pytest.approx(math.log(7), abs=1e-12)

    def test_adjoint_is_p_minus_onehot(self):
        z = leaf(np.zeros(7))
        nx.backward(nx.cross_entropy(nx.softmax(z), 0))
        expected = np.full(7, 1 / 7)
        expected[0] -= 1
        np.testing.assert_allclose(z.grad, expected, atol=1e-12)

    def test_fused_matches_composite(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(5, 7))
        y = rng.integers(0, 7, 5)
        fused = nx.softmax_cross_entropy(z, y).item()
        composite = nx.cross_entropy(nx.softmax(z, axis=1), y).item()
        assert fused == pytest.approx(composite, rel=1e-12)

    def test_random_logits_gradient(self):
        rng = np.random.default_rng(5)
        report = nx.grad_check(lambda z: nx.cross_entropy(nx.softmax(z), 2), [rng.normal(size=7)])
        assert report.passed

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            nx.cross_entropy(nx.softmax(np.zeros(7)), 7)
        with pytest.raises(IndexError):
            nx.softmax_cross_entropy(np.zeros((2, 7)), [0, -1])

    def test_weighted_sum(self):
        z = np.array([[2.0, 0.0], [0.0, 1.0]])
        w = np.array([0.25, 0.75])
        per = nx.per_sample_cross_entropy(z, [0, 0])
        assert nx.softmax_cross_entropy(z, [0, 0], w).item() == pytest.approx(float(w @ per))


class TestBackward:
    def test_sum_of_leaf(self):
        x = leaf(np.arange(6.0).reshape(2, 3))
        nx.backward(nx.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_unused_leaf_gets_zeros(self):
        x, unused = leaf([1.0, 2.0]), leaf([[3.0]])
        nx.backward(nx.tsum(x * x), [x, unused])
        np.testing.assert_array_equal(unused.grad, np.zeros((1, 1)))

    def test_non_scalar_loss(self):
        with pytest.raises(ContractError):
            nx.backward(leaf([1.0, 2.0]) * 2.0)

    def test_two_layer_network(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(4, 5))
        y = rng.integers(0, 3, 4)

        def loss(w1, b1, w2, b2):
            h = nx.relu(nx.matmul(x, w1) + b1)
            return nx.softmax_cross_entropy(nx.matmul(h, w2) + b2, y)

        point = [rng.normal(size=(5, 6)), rng.normal(size=6), rng.normal(size=(6, 3)), rng.normal(size=3)]
        assert nx.grad_check(loss, point).passed

    def test_shared_subexpression_accumulates(self):
        x = leaf([1.5])
        y = x * x
        nx.backward(nx.tsum(y + y))
        assert x.grad.tolist() == [6.0]

    def test_deterministic(self):
        rng = np.random.default_rng(7)
        a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        grads = []
        for _ in range(2):
            a, b = leaf(a0), leaf(b0)
            nx.backward(nx.tsum(nx.tanh(nx.matmul(a, b))))
            grads.append((a.grad.tobytes(), b.grad.tobytes()))
        assert grads[0] == grads[1]


class TestGradCheck:
    def test_linear_function_is_exact(self):
        c = np.array([1.0, -2.0, 0.5])
        report = nx.grad_check(lambda x: nx.tsum(x * c), [np.array([0.1, 0.2, 0.3])])
        assert report.worst_error < 1e-10

    def test_softmax_cross_entropy_composite(self):
        rng = np.random.default_rng(8)
        report = nx.grad_check(lambda z: nx.softmax_cross_entropy(z, [1, 4, 0]), [rng.normal(size=(3, 7))])
        assert report.passed and report.tolerance == 1e-4

    def test_shift_before_standardisation_has_zero_gradient(self):
        # the loss ignores b, so both gradients are rounding noise and must not count as an error
        rng = np.random.default_rng(9)
        x, y = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))

        def loss(b):
            h = b + x
            c = h - nx.mean(h, axis=0)
            return nx.tsum(c * nx.power(nx.mean(c * c, axis=0) + 1e-5, -0.5) * y)

        report = nx.grad_check(loss, [rng.normal(size=5)])
        assert report.passed and report.worst_error == 0.0

    def test_corrupted_adjoint_fails(self):
        def bad_square(a):
            return nx.make_node(a.data ** 2, [a], lambda g: [g * 3.0 * a.data])  # true adjoint is 2a

        report = nx.grad_check(lambda x: nx.tsum(bad_square(x)), [np.array([0.4, -1.2])])
        assert not report.passed and report.failures == [0]
