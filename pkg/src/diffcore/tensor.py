"""
张量与计算图
反向模式自动微分的基础结构：张量、计算节点、计算图记录器和反向传播
"""
import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..utils.errors import ShapeError


class OpKind(Enum):
    """算子类型"""
    CONV2D = "conv2d"
    DENSE = "dense"
    RELU = "relu"
    MAXPOOL = "maxpool"
    MEAN = "mean"
    SUM = "sum"
    MUL = "mul"
    ADD = "add"
    SUB = "sub"
    CLAMP = "clamp"
    SOFTMAX_CROSS_ENTROPY = "softmax_cross_entropy"
    BILINEAR_SAMPLE = "bilinear_sample"
    LERP = "lerp"
    RESHAPE = "reshape"
    CONCAT = "concat"
    PICK = "pick"


# 节点序号全局单调递增，反向传播按序号逆序即为拓扑逆序
_node_counter = itertools.count()
_local = threading.local()


def _graph_stack() -> List["Graph"]:
    if not hasattr(_local, "graphs"):
        _local.graphs = []
    return _local.graphs


def grad_enabled() -> bool:
    """当前线程是否记录计算图"""
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """在该上下文内不记录计算节点"""
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Tensor:
    """带梯度存储的稠密数组"""

    def __init__(
        self,
        values: Union[np.ndarray, float, Sequence],
        requires_grad: bool = False,
        dtype: Optional[np.dtype] = None,
        name: str = ""
    ):
        """
        Args:
            values: 数值（会被转换为浮点数组）
            requires_grad: 是否为需要梯度的叶子
            dtype: 指定精度，缺省时整数输入转为 float64，浮点输入保留原精度
            name: 调试用名称
        """
        array = np.asarray(values, dtype=dtype)
        if array.dtype.kind != "f":
            array = array.astype(np.float64)
        self.values: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional["Node"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() 仅适用于标量张量，当前形状 {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    # 运算符重载委托给 ops 模块
    def __add__(self, other):
        from .ops import add
        return add(self, other)

    def __radd__(self, other):
        from .ops import add
        return add(other, self)

    def __sub__(self, other):
        from .ops import sub
        return sub(self, other)

    def __rsub__(self, other):
        from .ops import sub
        return sub(other, self)

    def __mul__(self, other):
        from .ops import mul
        return mul(self, other)

    def __rmul__(self, other):
        from .ops import mul
        return mul(other, self)

    def __neg__(self):
        from .ops import mul
        return mul(self, -1.0)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"


def as_tensor(value: Union[Tensor, np.ndarray, float, Sequence], dtype: Optional[np.dtype] = None) -> Tensor:
    """非张量输入包装为常量张量"""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


BackwardRule = Callable[[np.ndarray, Tuple[bool, ...]], Tuple[Optional[np.ndarray], ...]]
ForwardRule = Callable[..., np.ndarray]


@dataclass(eq=False)
class Node:
    """计算图中的一次算子调用"""
    seq: int
    op_kind: OpKind
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward_rule: BackwardRule
    forward_rule: ForwardRule


@dataclass(eq=False)
class Graph:
    """
    计算图记录器

    作为上下文管理器使用时，期间创建的所有节点按创建顺序记录，
    顺序即拓扑序。图只属于创建它的线程。
    """
    nodes: List[Node] = field(default_factory=list)

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _graph_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def replay(self) -> List[np.ndarray]:
        """
        以当前输入值重新执行所有记录节点的前向规则

        Returns:
            每个节点的重算输出
        """
        return [node.forward_rule(*[t.values for t in node.inputs]) for node in self.nodes]

    def clear(self) -> None:
        self.nodes.clear()


def active_graph() -> Optional[Graph]:
    stack = _graph_stack()
    return stack[-1] if stack else None


def make_output(
    op_kind: OpKind,
    values: np.ndarray,
    inputs: Tuple[Tensor, ...],
    backward_rule: BackwardRule,
    forward_rule: ForwardRule
) -> Tensor:
    """
    构造算子输出张量，必要时挂接计算节点

    Args:
        op_kind: 算子类型
        values: 前向结果
        inputs: 输入张量
        backward_rule: 局部反向规则
        forward_rule: 前向规则（用于重放）

    Returns:
        输出张量
    """
    out = Tensor(values)
    if not grad_enabled() or not any(t.requires_grad for t in inputs):
        return out

    out.requires_grad = True
    node = Node(next(_node_counter), op_kind, inputs, out, backward_rule, forward_rule)
    out._node = node
    graph = active_graph()
    if graph is not None:
        graph.record(node)
    return out


def backward(loss: Tensor) -> None:
    """
    从标量损失反向传播，梯度累加到所有需要梯度的叶子

    Args:
        loss: 标量损失张量

    Raises:
        ShapeError: 损失不是标量
    """
    if loss.values.size != 1:
        raise ShapeError(f"反向传播要求标量损失，当前形状 {loss.shape}")

    seed = np.ones_like(loss.values)
    if loss._node is None:
        if loss.requires_grad:
            _accumulate(loss, seed)
        return

    # 收集损失依赖的全部节点
    nodes: Dict[int, Node] = {}
    stack = [loss._node]
    while stack:
        node = stack.pop()
        if node.seq in nodes:
            continue
        nodes[node.seq] = node
        for tensor in node.inputs:
            if tensor._node is not None and tensor._node.seq not in nodes:
                stack.append(tensor._node)

    grads: Dict[int, np.ndarray] = {id(loss): seed}
    for seq in sorted(nodes, reverse=True):
        node = nodes[seq]
        upstream = grads.pop(id(node.output), None)
        if upstream is None:
            continue
        needs = tuple(t.requires_grad for t in node.inputs)
        input_grads = node.backward_rule(upstream, needs)
        for tensor, grad in zip(node.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor._node is None:
                _accumulate(tensor, grad)
            else:
                key = id(tensor)
                grads[key] = grads[key] + grad if key in grads else grad


def _accumulate(leaf: Tensor, grad: np.ndarray) -> None:
    grad = np.asarray(grad, dtype=leaf.dtype).reshape(leaf.shape)
    leaf.grad = grad.copy() if leaf.grad is None else leaf.grad + grad
