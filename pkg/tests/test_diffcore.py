"""
自动微分算子测试：前向数值、反向规则、计算图记录与错误处理
"""
import numpy as np
import pytest

from src.diffcore import (
    Graph, OpKind, Tensor, add, backward, clamp, concat, forward_op, grad_check, lerp, mean, mul,
    no_grad, pick, relu, reshape, softmax_cross_entropy, sub, sum as tensor_sum
)
from src.diffcore.gradcheck import GradCheckReport, grad_check_report
from src.diffcore.tensor import make_output
from src.utils.errors import NonFiniteError, ShapeError


class TestElementwise:

    def test_add_broadcast_gradient_is_summed(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        backward(tensor_sum(add(a, b)))
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
        np.testing.assert_array_equal(b.grad, np.full(3, 2.0))

    def test_sub_and_mul(self):
        a = Tensor(np.array([2.0, -1.0]), requires_grad=True)
        b = Tensor(np.array([0.5, 4.0]), requires_grad=True)
        out = tensor_sum(mul(sub(a, b), b))
        backward(out)
        assert out.item() == pytest.approx((2.0 - 0.5) * 0.5 + (-1.0 - 4.0) * 4.0)
        np.testing.assert_allclose(a.grad, b.values)
        np.testing.assert_allclose(b.grad, a.values - 2 * b.values)

    def test_operator_overloads(self):
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        out = tensor_sum(2.0 * a - 1.0 + a * a)
        backward(out)
        np.testing.assert_allclose(a.grad, 2.0 + 2 * a.values)

    def test_lerp_endpoints_are_exact(self):
        rng = np.random.default_rng(0)
        a, b = rng.uniform(size=(4, 4)), rng.uniform(size=(4, 4))
        np.testing.assert_array_equal(lerp(a, b, 0.0).values, a)
        np.testing.assert_array_equal(lerp(a, b, 1.0).values, b)

    def test_lerp_gradients(self):
        a = Tensor(np.array([0.2, 0.4]), requires_grad=True)
        b = Tensor(np.array([1.0, 0.0]), requires_grad=True)
        t = Tensor(np.array([0.25, 0.5]), requires_grad=True)
        backward(tensor_sum(lerp(a, b, t)))
        np.testing.assert_allclose(a.grad, 1 - t.values)
        np.testing.assert_allclose(b.grad, t.values)
        np.testing.assert_allclose(t.grad, b.values - a.values)

    def test_relu_kink_has_zero_gradient(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
        backward(tensor_sum(relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_clamp_passes_gradient_near_bounds(self):
        x = Tensor(np.array([-0.5, -0.005, 0.5, 1.005, 2.0]), requires_grad=True)
        out = clamp(x)
        backward(tensor_sum(out))
        np.testing.assert_array_equal(out.values, [0.0, 0.0, 0.5, 1.0, 1.0])
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 1.0, 1.0, 0.0])

    def test_clamp_rejects_inverted_bounds(self):
        with pytest.raises(ShapeError):
            clamp(Tensor([0.5]), 1.0, 0.0)


class TestReductionsAndShapes:

    def test_mean_over_axis(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        out = mean(x, axis=1)
        np.testing.assert_allclose(out.values, [1.0, 4.0])
        backward(tensor_sum(out))
        np.testing.assert_allclose(x.grad, np.full((2, 3), 1 / 3))

    def test_reshape_and_concat(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.zeros((1, 2)), requires_grad=True)
        joined = concat([a, b], axis=0)
        assert joined.shape == (3, 2)
        flat = reshape(joined, (6,))
        backward(tensor_sum(mul(flat, np.arange(6.0))))
        np.testing.assert_allclose(a.grad, [[0.0, 1.0], [2.0, 3.0]])
        np.testing.assert_allclose(b.grad, [[4.0, 5.0]])

    def test_reshape_rejects_bad_shape(self):
        with pytest.raises(ShapeError):
            reshape(Tensor(np.ones(5)), (2, 3))

    def test_pick_routes_gradient_to_selected_column(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        out = pick(x, [2, 0])
        np.testing.assert_array_equal(out.values, [2.0, 3.0])
        backward(tensor_sum(out))
        np.testing.assert_array_equal(x.grad, [[0, 0, 1], [1, 0, 0]])

    def test_pick_rejects_out_of_range(self):
        with pytest.raises(ShapeError):
            pick(Tensor(np.ones((2, 3))), 3)


class TestCrossEntropy:

    def test_matches_manual_log_softmax(self):
        logits = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
        targets = np.array([1, 2])
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        expected = -log_probs[[0, 1], targets].mean()
        assert softmax_cross_entropy(Tensor(logits), targets).item() == pytest.approx(expected, rel=1e-12)

    def test_scalar_target_broadcasts(self):
        logits = Tensor(np.array([[0.0, 1.0], [2.0, 0.0]]))
        assert softmax_cross_entropy(logits, 1).item() == pytest.approx(
            softmax_cross_entropy(logits, [1, 1]).item())

    def test_gradient_is_softmax_minus_onehot(self):
        logits = Tensor(np.array([[0.0, np.log(3.0)]]), requires_grad=True)
        backward(softmax_cross_entropy(logits, 0))
        np.testing.assert_allclose(logits.grad, [[0.25 - 1.0, 0.75]])

    def test_rejects_bad_target(self):
        with pytest.raises(ShapeError):
            softmax_cross_entropy(Tensor(np.zeros((1, 2))), 2)


class TestGraphAndErrors:

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            out = mul(x, 2.0)
        assert out.is_leaf
        assert not out.requires_grad

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            backward(mul(x, 2.0))

    def test_nan_input_is_rejected(self):
        with pytest.raises(NonFiniteError):
            add(Tensor([np.nan]), 1.0)

    def test_gradients_accumulate_for_shared_leaf(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        backward(tensor_sum(add(mul(x, x), x)))
        np.testing.assert_allclose(x.grad, [7.0])

    def test_graph_records_in_topological_order_and_replays(self):
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        with Graph() as graph:
            y = relu(mul(x, 3.0))
            tensor_sum(y)
        assert [node.op_kind for node in graph.nodes] == [OpKind.MUL, OpKind.RELU, OpKind.SUM]
        x.values = np.array([-1.0, 2.0])
        replayed = graph.replay()
        np.testing.assert_allclose(replayed[0], [-3.0, 6.0])

    def test_forward_op_by_name(self):
        out = forward_op("relu", Tensor(np.array([-1.0, 1.0])))
        np.testing.assert_array_equal(out.values, [0.0, 1.0])
        with pytest.raises(ShapeError):
            forward_op("softplus", Tensor([1.0]))

    def test_square_grad_check(self):
        point = Tensor(np.array([3.0]))
        assert grad_check(lambda x: mul(x, x), point) < 1e-6


def _square_with_wrong_backward(x: Tensor) -> Tensor:
    """前向 x²，反向故意写成 10x"""
    return make_output(OpKind.MUL, np.square(x.values), (x,), lambda g, needs: (g * 10 * x.values,), np.square)


class TestGradCheckReport:

    def test_wrong_backward_rejected_at_large_magnitude(self):
        point = Tensor(np.random.default_rng(0).normal(size=(3, 3)) * 1e7)
        report = grad_check_report(lambda x: tensor_sum(_square_with_wrong_backward(x)), point)
        assert not report.kink_mask.all()
        assert report.max_relative_error > 1.0
        assert not report.within()

    def test_correct_backward_passes_at_large_magnitude(self):
        point = Tensor(np.random.default_rng(0).normal(size=(3, 3)) * 1e7)
        report = grad_check_report(lambda x: tensor_sum(mul(x, x)), point)
        assert not report.kink_mask.any()
        assert report.max_relative_error < 1e-2

    def test_all_kinks_is_not_a_pass(self):
        shape = (2, 2)
        report = GradCheckReport(
            analytic=np.full(shape, 5.0), numeric=np.ones(shape), relative_error=np.full(shape, 4.0),
            nan_mask=np.zeros(shape, dtype=bool), kink_mask=np.ones(shape, dtype=bool),
        )
        assert report.degenerate
        assert report.max_relative_error == float("inf")
        assert report.within(rtol=1e9) is False

    def test_mostly_kinks_is_not_a_pass(self):
        shape = (4,)
        kinks = np.array([True, True, True, False])
        report = GradCheckReport(
            analytic=np.ones(shape), numeric=np.ones(shape), relative_error=np.zeros(shape),
            nan_mask=np.zeros(shape, dtype=bool), kink_mask=kinks,
        )
        assert report.max_relative_error == float("inf")
        assert not report.within()

    def test_rare_kinks_are_excluded(self):
        shape = (4,)
        report = GradCheckReport(
            analytic=np.array([1.0, 1.0, 1.0, 9.0]), numeric=np.ones(shape),
            relative_error=np.array([0.0, 0.0, 0.0, 8.0]),
            nan_mask=np.zeros(shape, dtype=bool), kink_mask=np.array([False, False, False, True]),
        )
        assert report.max_relative_error == 0.0
        assert report.within()
