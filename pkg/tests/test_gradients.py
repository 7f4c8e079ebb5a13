"""
有限差分梯度校验

64 位精度、步长 1e-5，每个算子 100 个随机种子；
relu 拐点、最大池化并列与截断边界由校验报告的拐点掩码排除。
"""
import math

import numpy as np
import pytest

from src.attack import TransformSupport, compose_attacked_batch, joint_loss, sample_transform, warp_batch
from src.diffcore import (
    Tensor, add, backward, clamp, concat, conv2d, dense, grad_check_report, lerp, maxpool2d, mean, mul,
    pick, relu, reshape, softmax_cross_entropy, sub, sum as tensor_sum
)

SEEDS = range(100)
RTOL = 1e-4


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    """用固定随机权重把任意形状输出收缩为标量"""
    return tensor_sum(mul(out, weights))


def _op_case(name: str, rng: np.random.Generator):
    """返回 (求导位置, 标量函数)"""
    if name == "add":
        const = rng.normal(size=4)
        w = rng.normal(size=(3, 4))
        return Tensor(rng.normal(size=(3, 4))), lambda x: _weighted(add(x, const), w)
    if name == "sub":
        const = rng.normal(size=(3, 4))
        w = rng.normal(size=(3, 4))
        return Tensor(rng.normal(size=(3, 4))), lambda x: _weighted(sub(const, x), w)
    if name == "mul":
        const = rng.normal(size=(3, 1))
        w = rng.normal(size=(3, 4))
        return Tensor(rng.normal(size=(3, 4))), lambda x: _weighted(mul(x, x) * const, w)
    if name == "lerp":
        a, b = rng.uniform(size=(2, 5)), rng.uniform(size=(2, 5))
        w = rng.normal(size=(2, 5))
        return Tensor(rng.uniform(size=(2, 5))), lambda t: _weighted(lerp(a, mul(b, t), t), w)
    if name == "relu":
        w = rng.normal(size=(4, 4))
        return Tensor(rng.normal(size=(4, 4))), lambda x: _weighted(relu(x), w)
    if name == "clamp":
        w = rng.normal(size=(4, 4))
        return Tensor(rng.uniform(0.05, 0.95, size=(4, 4))), lambda x: _weighted(clamp(mul(x, x)), w)
    if name == "sum":
        w = rng.normal(size=3)
        return Tensor(rng.normal(size=(3, 4))), lambda x: _weighted(tensor_sum(mul(x, x), axis=1), w)
    if name == "mean":
        w = rng.normal(size=4)
        return Tensor(rng.normal(size=(3, 4))), lambda x: _weighted(mean(mul(x, x), axis=0), w)
    if name == "reshape":
        w = rng.normal(size=(2, 6))
        return Tensor(rng.normal(size=(3, 4))), lambda x: _weighted(reshape(mul(x, x), (2, 6)), w)
    if name == "concat":
        other = rng.normal(size=(2, 4))
        w = rng.normal(size=(5, 4))
        return Tensor(rng.normal(size=(3, 4))), lambda x: _weighted(concat([mul(x, x), other]), w)
    if name == "pick":
        cols = rng.integers(0, 4, size=3)
        w = rng.normal(size=3)
        return Tensor(rng.normal(size=(3, 4))), lambda x: _weighted(pick(mul(x, x), cols), w)
    if name == "dense":
        weight, bias = rng.normal(size=(5, 3)), rng.normal(size=3)
        w = rng.normal(size=(2, 3))
        return Tensor(rng.normal(size=(2, 5))), lambda x: _weighted(dense(x, weight, bias), w)
    if name == "dense_weight":
        x_val = rng.normal(size=(2, 5))
        w = rng.normal(size=(2, 3))
        return Tensor(rng.normal(size=(5, 3))), lambda weight: _weighted(dense(x_val, weight), w)
    if name == "conv2d":
        weight, bias = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        w = rng.normal(size=(1, 3, 4, 4))
        return Tensor(rng.normal(size=(1, 2, 4, 4))), lambda x: _weighted(conv2d(x, weight, bias), w)
    if name == "conv2d_weight":
        x_val = rng.normal(size=(2, 2, 4, 4))
        w = rng.normal(size=(2, 3, 4, 4))
        return Tensor(rng.normal(size=(3, 2, 3, 3))), lambda weight: _weighted(conv2d(x_val, weight), w)
    if name == "maxpool2d":
        w = rng.normal(size=(1, 2, 2, 2))
        return Tensor(rng.normal(size=(1, 2, 4, 4))), lambda x: _weighted(maxpool2d(x), w)
    if name == "softmax_cross_entropy":
        targets = rng.integers(0, 4, size=3)
        return Tensor(rng.normal(size=(3, 4))), lambda x: softmax_cross_entropy(x, targets)
    if name == "bilinear_sample":
        support = TransformSupport(theta_max=math.pi, scale_low=0.3, scale_high=0.7)
        specs = [sample_transform(support, (3, 8, 8), (3, 4, 4), rng) for _ in range(2)]
        w = rng.normal(size=(2, 3, 8, 8))
        return Tensor(rng.uniform(size=(3, 4, 4))), lambda p: _weighted(warp_batch(p, specs, (8, 8))[0], w)
    raise KeyError(name)


OP_NAMES = [
    "add", "sub", "mul", "lerp", "relu", "clamp", "sum", "mean", "reshape", "concat", "pick",
    "dense", "dense_weight", "conv2d", "conv2d_weight", "maxpool2d", "softmax_cross_entropy", "bilinear_sample",
]


class TestOperatorGradients:

    @pytest.mark.parametrize("name", OP_NAMES)
    def test_matches_central_differences(self, name):
        for seed in SEEDS:
            point, f = _op_case(name, np.random.default_rng(seed))
            report = grad_check_report(f, point)
            assert not report.nan_mask.any(), f"{name} seed={seed}"
            assert report.max_relative_error < RTOL, f"{name} seed={seed}: {report.max_relative_error:.3g}"


def _attack_case(seed: int, model):
    """8×8 图像、4×4 补丁与遮罩上的联合损失"""
    rng = np.random.default_rng(seed)
    support = TransformSupport(theta_max=math.pi, scale_low=0.3, scale_high=0.7)
    images = rng.uniform(size=(2, 3, 8, 8))
    specs = [sample_transform(support, images.shape[1:], (3, 4, 4), rng) for _ in range(2)]
    patch = rng.uniform(size=(3, 4, 4))
    mask = rng.uniform(size=(1, 4, 4))
    target = int(rng.integers(0, model.num_classes))
    gamma = float(rng.uniform(0.0, 10.0))
    return images, specs, patch, mask, target, gamma


class TestAttackLossGradients:

    def test_joint_loss_wrt_patch(self, random_linear):
        for seed in SEEDS:
            images, specs, patch, mask, target, gamma = _attack_case(seed, random_linear)

            def f(p):
                attacked = compose_attacked_batch(images, p, specs, mask)
                return joint_loss(random_linear, attacked, target, mask, gamma)[0]

            report = grad_check_report(f, Tensor(patch))
            assert report.max_relative_error < RTOL, f"seed={seed}"

    def test_joint_loss_wrt_mask(self, random_linear):
        for seed in SEEDS:
            images, specs, patch, mask, target, gamma = _attack_case(seed, random_linear)

            def f(m):
                attacked = compose_attacked_batch(images, patch, specs, m)
                return joint_loss(random_linear, attacked, target, m, gamma)[0]

            report = grad_check_report(f, Tensor(mask))
            assert report.max_relative_error < RTOL, f"seed={seed}"

    def test_opaque_loss_through_conv_model(self, tiny_conv_model):
        rng = np.random.default_rng(0)
        support = TransformSupport(theta_max=math.pi, scale_low=0.5, scale_high=0.7)
        for seed in range(20):
            images = rng.uniform(size=(2, 3, 4, 4))
            specs = [sample_transform(support, (3, 4, 4), (3, 3, 3), rng) for _ in range(2)]

            def f(p):
                attacked = compose_attacked_batch(images, p, specs)
                return softmax_cross_entropy(tiny_conv_model.forward(attacked), seed % 3)

            report = grad_check_report(f, Tensor(rng.uniform(size=(3, 3, 3))))
            assert report.max_relative_error < RTOL, f"seed={seed}"

    def test_canvas_sum_wrt_patch(self):
        rng = np.random.default_rng(5)
        support = TransformSupport(theta_max=math.pi, scale_low=0.2, scale_high=0.6)
        specs = [sample_transform(support, (16, 16), (3, 6, 6), rng) for _ in range(3)]
        report = grad_check_report(lambda p: tensor_sum(warp_batch(p, specs, (16, 16))[0]),
                                   Tensor(rng.uniform(size=(3, 6, 6))))
        assert report.max_relative_error < RTOL


class TestObtrusivenessGradient:

    def test_squared_mean_gradient_closed_form(self):
        for seed in range(20):
            mask = Tensor(np.random.default_rng(seed).uniform(size=(1, 4, 4)), requires_grad=True)
            po = mean(mask)
            backward(mul(po, po))
            np.testing.assert_allclose(mask.grad, np.full((1, 4, 4), 2 * po.item() / 16), rtol=1e-12)

    def test_squared_mean_matches_central_differences(self):
        mask = Tensor(np.random.default_rng(1).uniform(size=(1, 4, 4)))
        report = grad_check_report(lambda m: mul(mean(m), mean(m)), mask)
        assert report.max_relative_error < 1e-8
