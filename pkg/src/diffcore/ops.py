"""
可微算子
每个算子给出前向结果并在计算图上登记局部反向规则
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..utils.errors import NonFiniteError, ShapeError
from .tensor import OpKind, Tensor, as_tensor, make_output

Operand = Union[Tensor, np.ndarray, float]
Axis = Union[None, int, Tuple[int, ...]]


def _reject_nan(op_kind: OpKind, *tensors: Tensor) -> None:
    for tensor in tensors:
        if np.isnan(tensor.values).any():
            raise NonFiniteError(f"{op_kind.value}: 输入包含 NaN (形状 {tensor.shape})")


def _coerce_pair(a: Operand, b: Operand) -> Tuple[Tensor, Tensor]:
    """常量操作数沿用另一侧张量的精度"""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


def _broadcast_shape(op_kind: OpKind, *shapes: Tuple[int, ...]) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as e:
        raise ShapeError(f"{op_kind.value}: 形状无法广播 {list(shapes)}") from e


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度按原形状求和还原"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# 逐元素算子
# ---------------------------------------------------------------------------

def add(a: Operand, b: Operand) -> Tensor:
    a, b = _coerce_pair(a, b)
    _reject_nan(OpKind.ADD, a, b)
    _broadcast_shape(OpKind.ADD, a.shape, b.shape)

    def rule(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return make_output(OpKind.ADD, a.values + b.values, (a, b), rule, np.add)


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _coerce_pair(a, b)
    _reject_nan(OpKind.SUB, a, b)
    _broadcast_shape(OpKind.SUB, a.shape, b.shape)

    def rule(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )

    return make_output(OpKind.SUB, a.values - b.values, (a, b), rule, np.subtract)


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _coerce_pair(a, b)
    _reject_nan(OpKind.MUL, a, b)
    _broadcast_shape(OpKind.MUL, a.shape, b.shape)

    def rule(g, needs):
        return (
            _unbroadcast(g * b.values, a.shape) if needs[0] else None,
            _unbroadcast(g * a.values, b.shape) if needs[1] else None,
        )

    return make_output(OpKind.MUL, a.values * b.values, (a, b), rule, np.multiply)


def _lerp_values(a: np.ndarray, b: np.ndarray, t: np.ndarray) -> np.ndarray:
    # t=0 时结果与 a 逐位相同，t=1 时与 b 逐位相同
    return a * (1 - t) + b * t


def lerp(a: Operand, b: Operand, t: Operand) -> Tensor:
    """
    线性插值 a·(1−t) + b·t

    Args:
        a: 起点
        b: 终点
        t: 权重（可广播）

    Returns:
        插值结果
    """
    reference = next((x for x in (a, b, t) if isinstance(x, Tensor)), None)
    dtype = reference.dtype if reference is not None else None
    a, b, t = (as_tensor(x, dtype=dtype) for x in (a, b, t))
    _reject_nan(OpKind.LERP, a, b, t)
    _broadcast_shape(OpKind.LERP, a.shape, b.shape, t.shape)

    def rule(g, needs):
        return (
            _unbroadcast(g * (1 - t.values), a.shape) if needs[0] else None,
            _unbroadcast(g * t.values, b.shape) if needs[1] else None,
            _unbroadcast(g * (b.values - a.values), t.shape) if needs[2] else None,
        )

    return make_output(OpKind.LERP, _lerp_values(a.values, b.values, t.values), (a, b, t), rule, _lerp_values)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _reject_nan(OpKind.RELU, x)

    def forward(v):
        return np.where(v > 0, v, np.zeros_like(v))

    def rule(g, needs):
        # 拐点处取 0 次梯度
        return (g * (x.values > 0),)

    return make_output(OpKind.RELU, forward(x.values), (x,), rule, forward)


def clamp(x: Tensor, low: float = 0.0, high: float = 1.0, band: float = 1e-2) -> Tensor:
    """
    直通式截断：前向截断到 [low, high]，反向在边界外 band 范围内直接透传梯度

    Args:
        x: 输入
        low: 下界
        high: 上界
        band: 边界外仍透传梯度的宽度

    Returns:
        截断后的张量
    """
    x = as_tensor(x)
    _reject_nan(OpKind.CLAMP, x)
    if low > high:
        raise ShapeError(f"clamp: 下界 {low} 大于上界 {high}")

    def forward(v):
        return np.clip(v, low, high)

    def rule(g, needs):
        passing = (x.values >= low - band) & (x.values <= high + band)
        return (g * passing,)

    return make_output(OpKind.CLAMP, forward(x.values), (x,), rule, forward)


# ---------------------------------------------------------------------------
# 归约与形状算子
# ---------------------------------------------------------------------------

def _normalize_axis(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def sum(x: Tensor, axis: Axis = None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    _reject_nan(OpKind.SUM, x)
    axes = _normalize_axis(axis, x.ndim)

    def forward(v):
        return v.sum(axis=axes)

    def rule(g, needs):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape).copy(),)

    return make_output(OpKind.SUM, forward(x.values), (x,), rule, forward)


def mean(x: Tensor, axis: Axis = None) -> Tensor:
    x = as_tensor(x)
    _reject_nan(OpKind.MEAN, x)
    axes = _normalize_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    def forward(v):
        return v.mean(axis=axes)

    def rule(g, needs):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape) / count,)

    return make_output(OpKind.MEAN, forward(x.values), (x,), rule, forward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    _reject_nan(OpKind.RESHAPE, x)
    try:
        out = x.values.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: 无法把 {x.shape} 变形为 {tuple(shape)}") from e

    def forward(v):
        return v.reshape(tuple(shape))

    def rule(g, needs):
        return (g.reshape(x.shape),)

    return make_output(OpKind.RESHAPE, out, (x,), rule, forward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: 输入为空")
    _reject_nan(OpKind.CONCAT, *tensors)
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: 形状不兼容 {[t.shape for t in tensors]}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def forward(*values):
        return np.concatenate(values, axis=axis)

    def rule(g, needs):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if need else None for p, need in zip(parts, needs))

    return make_output(OpKind.CONCAT, out, tensors, rule, forward)


def pick(x: Tensor, indices: Union[int, Sequence[int], np.ndarray]) -> Tensor:
    """
    逐行取出指定列（例如每个样本的某一类得分）

    Args:
        x: 形状 (N, K)
        indices: 长度 N 的列下标，或单个下标

    Returns:
        形状 (N,) 的张量
    """
    x = as_tensor(x)
    _reject_nan(OpKind.PICK, x)
    if x.ndim != 2:
        raise ShapeError(f"pick: 需要二维输入，当前形状 {x.shape}")
    rows = np.arange(x.shape[0])
    cols = np.broadcast_to(np.asarray(indices, dtype=np.int64), rows.shape)
    if cols.size and (cols.min() < 0 or cols.max() >= x.shape[1]):
        raise ShapeError(f"pick: 下标越界，类别数 {x.shape[1]}")

    def forward(v):
        return v[rows, cols]

    def rule(g, needs):
        grad = np.zeros_like(x.values)
        grad[rows, cols] = g
        return (grad,)

    return make_output(OpKind.PICK, forward(x.values), (x,), rule, forward)


# ---------------------------------------------------------------------------
# 网络层算子
# ---------------------------------------------------------------------------

def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """
    全连接层 x·W + b

    Args:
        x: 形状 (N, D)
        weight: 形状 (D, F)
        bias: 形状 (F,)

    Returns:
        形状 (N, F)
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias if bias is not None else np.zeros(weight.shape[-1], dtype=weight.dtype))
    _reject_nan(OpKind.DENSE, x, weight, bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: 输入 {x.shape} 与权重 {weight.shape} 不匹配")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: 偏置形状 {bias.shape} 应为 {(weight.shape[1],)}")

    def forward(xv, wv, bv):
        return xv @ wv + bv

    def rule(g, needs):
        return (
            g @ weight.values.T if needs[0] else None,
            x.values.T @ g if needs[1] else None,
            g.sum(axis=0) if needs[2] else None,
        )

    return make_output(OpKind.DENSE, forward(x.values, weight.values, bias.values), (x, weight, bias), rule, forward)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, padding: int = 1) -> Tensor:
    """
    步长为 1 的二维卷积（零填充）

    Args:
        x: 形状 (N, C, H, W)
        weight: 形状 (F, C, k, k)
        bias: 形状 (F,)
        padding: 四周填充宽度

    Returns:
        形状 (N, F, H + 2p − k + 1, W + 2p − k + 1)
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias if bias is not None else np.zeros(weight.shape[0], dtype=weight.dtype))
    _reject_nan(OpKind.CONV2D, x, weight, bias)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: 需要四维输入与权重，当前 {x.shape} / {weight.shape}")
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if wc != c or kh != kw:
        raise ShapeError(f"conv2d: 输入通道 {c} 与权重 {weight.shape} 不匹配")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d: 偏置形状 {bias.shape} 应为 {(f,)}")
    k = kh
    out_h, out_w = h + 2 * padding - k + 1, w + 2 * padding - k + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d: 输入 {x.shape} 小于卷积核 {k}")

    def windows(xv):
        padded = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        return sliding_window_view(padded, (k, k), axis=(2, 3))  # (N, C, Ho, Wo, k, k)

    def forward(xv, wv, bv):
        out = np.tensordot(windows(xv), wv, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, F)
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + bv[None, :, None, None]

    def rule(g, needs):
        grad_x = grad_w = grad_b = None
        if needs[1]:
            grad_w = np.tensordot(g, windows(x.values), axes=([0, 2, 3], [0, 2, 3]))
        if needs[2]:
            grad_b = g.sum(axis=(0, 2, 3))
        if needs[0]:
            padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
            for di in range(k):
                for dj in range(k):
                    contrib = np.tensordot(g, weight.values[:, :, di, dj], axes=([1], [0]))  # (N, Ho, Wo, C)
                    padded[:, :, di:di + out_h, dj:dj + out_w] += contrib.transpose(0, 3, 1, 2)
            grad_x = padded[:, :, padding:padding + h, padding:padding + w]
        return grad_x, grad_w, grad_b

    return make_output(OpKind.CONV2D, forward(x.values, weight.values, bias.values), (x, weight, bias), rule, forward)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """
    不重叠最大池化，并列最大值时梯度只回传给第一个

    Args:
        x: 形状 (N, C, H, W)，H、W 需能被 size 整除
        size: 池化窗口边长

    Returns:
        形状 (N, C, H/size, W/size)
    """
    x = as_tensor(x)
    _reject_nan(OpKind.MAXPOOL, x)
    if x.ndim != 4 or x.shape[2] % size or x.shape[3] % size:
        raise ShapeError(f"maxpool: 形状 {x.shape} 不能被窗口 {size} 整除")
    n, c, h, w = x.shape
    oh, ow = h // size, w // size

    def blocks(v):
        return v.reshape(n, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, size * size)

    def forward(v):
        return blocks(v).max(axis=-1)

    def rule(g, needs):
        winner = blocks(x.values).argmax(axis=-1)
        routed = np.zeros((n, c, oh, ow, size * size), dtype=g.dtype)
        np.put_along_axis(routed, winner[..., None], g[..., None], axis=-1)
        grad = routed.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (grad,)

    return make_output(OpKind.MAXPOOL, forward(x.values), (x,), rule, forward)


def softmax_cross_entropy(logits: Tensor, targets: Union[int, Sequence[int], np.ndarray]) -> Tensor:
    """
    批均值的 softmax 交叉熵

    Args:
        logits: 形状 (N, K)，或单样本 (K,)
        targets: 长度 N 的类别下标，或单个下标

    Returns:
        标量损失
    """
    logits = as_tensor(logits)
    _reject_nan(OpKind.SOFTMAX_CROSS_ENTROPY, logits)
    if logits.ndim == 1:
        logits = reshape(logits, (1, logits.shape[0]))
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: 需要二维 logits，当前形状 {logits.shape}")
    n, k = logits.shape
    labels = np.broadcast_to(np.asarray(targets, dtype=np.int64), (n,))
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"softmax_cross_entropy: 目标类别越界，类别数 {k}")
    rows = np.arange(n)

    def log_softmax(v):
        shifted = v - v.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def forward(v):
        return -log_softmax(v)[rows, labels].mean()

    def rule(g, needs):
        probs = np.exp(log_softmax(logits.values))
        probs[rows, labels] -= 1.0
        return (probs * (g / n),)

    return make_output(OpKind.SOFTMAX_CROSS_ENTROPY, np.asarray(forward(logits.values)), (logits,), rule, forward)


# ---------------------------------------------------------------------------
# 双线性采样
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BilinearSampler:
    """
    预先算好的双线性采样表

    dst 为输出（K·H·W 展平）中接收内容的位置，
    taps/weights 为每个位置对应的四个源像素（P·Q 展平）及其权重。
    """
    src_shape: Tuple[int, int]
    out_shape: Tuple[int, int, int]
    dst: np.ndarray
    taps: np.ndarray
    weights: np.ndarray


def bilinear_sample(src: Tensor, sampler: BilinearSampler) -> Tensor:
    """
    按采样表把源图像重采样到若干画布上，未覆盖位置为 0

    Args:
        src: 形状 (C, P, Q)
        sampler: 采样表

    Returns:
        形状 (K, C, H, W)
    """
    src = as_tensor(src)
    _reject_nan(OpKind.BILINEAR_SAMPLE, src)
    if src.ndim != 3 or src.shape[1:] != tuple(sampler.src_shape):
        raise ShapeError(f"bilinear_sample: 源形状 {src.shape} 与采样表 {sampler.src_shape} 不符")
    channels = src.shape[0]
    k, h, w = sampler.out_shape
    weights = sampler.weights.astype(src.dtype)
    flat_taps = sampler.taps.ravel()
    src_size = sampler.src_shape[0] * sampler.src_shape[1]

    def forward(v):
        flat = v.reshape(channels, -1)
        out = np.zeros((channels, k * h * w), dtype=v.dtype)
        out[:, sampler.dst] = (flat[:, sampler.taps] * weights).sum(axis=-1)
        return np.ascontiguousarray(out.reshape(channels, k, h, w).transpose(1, 0, 2, 3))

    def rule(g, needs):
        picked = g.transpose(1, 0, 2, 3).reshape(channels, -1)[:, sampler.dst]
        contrib = picked[:, :, None] * weights[None]
        grad = np.stack([
            np.bincount(flat_taps, weights=contrib[ch].ravel(), minlength=src_size)
            for ch in range(channels)
        ])
        return (grad.reshape(src.shape).astype(src.dtype),)

    return make_output(OpKind.BILINEAR_SAMPLE, forward(src.values), (src,), rule, forward)


# ---------------------------------------------------------------------------
# 统一入口
# ---------------------------------------------------------------------------

_FORWARD_RULES = {
    OpKind.CONV2D: conv2d,
    OpKind.DENSE: dense,
    OpKind.RELU: relu,
    OpKind.MAXPOOL: maxpool2d,
    OpKind.MEAN: mean,
    OpKind.SUM: sum,
    OpKind.MUL: mul,
    OpKind.ADD: add,
    OpKind.SUB: sub,
    OpKind.CLAMP: clamp,
    OpKind.SOFTMAX_CROSS_ENTROPY: softmax_cross_entropy,
    OpKind.BILINEAR_SAMPLE: bilinear_sample,
    OpKind.LERP: lerp,
    OpKind.RESHAPE: reshape,
    OpKind.CONCAT: lambda *tensors, axis=0: concat(tensors, axis=axis),
    OpKind.PICK: pick,
}


def forward_op(op_kind: Union[OpKind, str], *inputs, **attrs) -> Tensor:
    """
    按算子类型执行前向计算并登记到计算图

    Args:
        op_kind: 算子类型或其名称，如 "relu"
        *inputs: 输入张量及位置参数
        **attrs: 算子属性，如 padding、axis

    Returns:
        输出张量

    Raises:
        ShapeError: 形状不合法或未知算子
        NonFiniteError: 输入含 NaN
    """
    try:
        kind = op_kind if isinstance(op_kind, OpKind) else OpKind(op_kind)
    except ValueError as e:
        raise ShapeError(f"未知算子: {op_kind}") from e
    return _FORWARD_RULES[kind](*inputs, **attrs)
