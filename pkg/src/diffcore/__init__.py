"""
自动微分模块初始化文件
"""
from .tensor import OpKind, Tensor, Node, Graph, as_tensor, backward, no_grad, grad_enabled, active_graph
from .ops import (
    BilinearSampler, forward_op,
    add, sub, mul, lerp, relu, clamp, sum, mean, reshape, concat, pick,
    dense, conv2d, maxpool2d, softmax_cross_entropy, bilinear_sample
)
from .gradcheck import GradCheckReport, grad_check, grad_check_report

__all__ = [
    'OpKind', 'Tensor', 'Node', 'Graph', 'as_tensor', 'backward', 'no_grad', 'grad_enabled', 'active_graph',
    'BilinearSampler', 'forward_op',
    'add', 'sub', 'mul', 'lerp', 'relu', 'clamp', 'sum', 'mean', 'reshape', 'concat', 'pick',
    'dense', 'conv2d', 'maxpool2d', 'softmax_cross_entropy', 'bilinear_sample',
    'GradCheckReport', 'grad_check', 'grad_check_report'
]
