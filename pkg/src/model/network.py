"""
分类网络
由层描述列表构建的小型卷积网络，参数以有序字典保存，前向计算全部经过自动微分算子
"""
import hashlib
import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ..diffcore import Tensor, conv2d, dense, maxpool2d, no_grad, relu, reshape
from ..utils.errors import ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LayerSpec:
    """
    单层描述

    kind 取 conv / relu / maxpool / flatten / dense；
    out 为卷积输出通道数或全连接输出维数，最后一个 dense 的 out 为空时取类别数。
    """
    kind: str
    out: Optional[int] = None
    kernel: int = 3
    padding: int = 1
    size: int = 2

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LayerSpec":
        return cls(**data)


LAYER_KINDS = ("conv", "relu", "maxpool", "flatten", "dense")

DEFAULT_ARCHITECTURE: Tuple[LayerSpec, ...] = (
    LayerSpec("conv", 16),
    LayerSpec("relu"),
    LayerSpec("maxpool"),
    LayerSpec("conv", 32),
    LayerSpec("relu"),
    LayerSpec("maxpool"),
    LayerSpec("flatten"),
    LayerSpec("dense", 64),
    LayerSpec("relu"),
    LayerSpec("dense"),
)

LINEAR_ARCHITECTURE: Tuple[LayerSpec, ...] = (LayerSpec("flatten"), LayerSpec("dense"))


class Model:
    """白盒分类器"""

    def __init__(
        self,
        architecture: Sequence[LayerSpec],
        params: Dict[str, np.ndarray],
        num_classes: int,
        input_shape: Tuple[int, int, int],
        metadata: Optional[Dict[str, Any]] = None
    ):
        self.architecture = tuple(architecture)
        self.params = dict(params)
        self.num_classes = int(num_classes)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.metadata = dict(metadata or {})

    @property
    def dtype(self) -> np.dtype:
        first = next(iter(self.params.values()), None)
        return first.dtype if first is not None else np.dtype(np.float64)

    def parameter_tensors(self, requires_grad: bool = False) -> Dict[str, Tensor]:
        return {name: Tensor(value, requires_grad=requires_grad, name=name) for name, value in self.params.items()}

    def forward(self, images: Union[Tensor, np.ndarray], params: Optional[Mapping[str, Tensor]] = None) -> Tensor:
        """
        前向计算 logits

        Args:
            images: 形状 (N, C, H, W) 或单张 (C, H, W)
            params: 参数张量（训练时传入需要梯度的叶子），缺省使用冻结的常量参数

        Returns:
            形状 (N, num_classes) 的 logits
        """
        x = images if isinstance(images, Tensor) else Tensor(images, dtype=self.dtype)
        if x.ndim == 3:
            x = reshape(x, (1,) + x.shape)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"输入形状 {x.shape} 与模型输入 {self.input_shape} 不匹配")

        params = params if params is not None else self.parameter_tensors()
        for index, layer in enumerate(self.architecture):
            prefix = f"{index}.{layer.kind}"
            if layer.kind == "conv":
                x = conv2d(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], padding=layer.padding)
            elif layer.kind == "dense":
                x = dense(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"])
            elif layer.kind == "relu":
                x = relu(x)
            elif layer.kind == "maxpool":
                x = maxpool2d(x, layer.size)
            elif layer.kind == "flatten":
                x = reshape(x, (x.shape[0], -1))
        return x

    def logits(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """不记录计算图的批量 logits"""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        outputs = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                outputs.append(self.forward(images[start:start + batch_size]).values)
        if not outputs:
            return np.zeros((0, self.num_classes), dtype=self.dtype)
        return np.concatenate(outputs)

    def freeze(self) -> "Model":
        """参数改为只读数组"""
        for value in self.params.values():
            value.flags.writeable = False
        return self

    def checksum(self) -> str:
        """参数名、形状与字节的 SHA-256"""
        digest = hashlib.sha256()
        for name, value in self.params.items():
            digest.update(name.encode('utf-8'))
            digest.update(str(value.shape).encode('utf-8'))
            digest.update(np.ascontiguousarray(value).tobytes())
        return digest.hexdigest()

    def architecture_dicts(self) -> List[Dict[str, Any]]:
        return [layer.to_dict() for layer in self.architecture]


def build_model(
    architecture: Sequence[LayerSpec] = DEFAULT_ARCHITECTURE,
    input_shape: Tuple[int, int, int] = (3, 32, 32),
    num_classes: int = 10,
    seed: int = 0,
    dtype: Union[str, np.dtype] = np.float32
) -> Model:
    """
    按层描述构建模型并做 He 初始化

    Args:
        architecture: 层描述列表
        input_shape: 输入形状 (C, H, W)
        num_classes: 类别数
        seed: 初始化随机种子
        dtype: 参数精度

    Returns:
        未训练的模型
    """
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    params: Dict[str, np.ndarray] = {}
    channels, height, width = input_shape
    features: Optional[int] = None

    for index, layer in enumerate(architecture):
        if layer.kind not in LAYER_KINDS:
            raise ShapeError(f"未知层类型: {layer.kind}")
        prefix = f"{index}.{layer.kind}"
        if layer.kind == "conv":
            if features is not None:
                raise ShapeError(f"第 {index} 层: flatten 之后不能再接卷积")
            k, out = layer.kernel, layer.out or num_classes
            fan_in = channels * k * k
            params[f"{prefix}.weight"] = (rng.standard_normal((out, channels, k, k)) * np.sqrt(2.0 / fan_in)).astype(dtype)
            params[f"{prefix}.bias"] = np.zeros(out, dtype=dtype)
            channels = out
            height, width = height + 2 * layer.padding - k + 1, width + 2 * layer.padding - k + 1
        elif layer.kind == "maxpool":
            if height % layer.size or width % layer.size:
                raise ShapeError(f"第 {index} 层: 特征图 {height}×{width} 不能被池化窗口 {layer.size} 整除")
            height, width = height // layer.size, width // layer.size
        elif layer.kind == "flatten":
            features = channels * height * width
        elif layer.kind == "dense":
            if features is None:
                raise ShapeError(f"第 {index} 层: 全连接层之前需要 flatten")
            out = layer.out or num_classes
            params[f"{prefix}.weight"] = (rng.standard_normal((features, out)) * np.sqrt(2.0 / features)).astype(dtype)
            params[f"{prefix}.bias"] = np.zeros(out, dtype=dtype)
            features = out

    if features != num_classes:
        raise ShapeError(f"网络输出维数 {features} 与类别数 {num_classes} 不一致")

    logger.debug(f"构建模型: {len(architecture)} 层, {len(params)} 个参数张量")
    return Model(architecture, params, num_classes, input_shape, {"init_seed": seed})


def softmax(logits: np.ndarray) -> np.ndarray:
    """数值稳定的 float64 softmax（最后一维）"""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def predict(model: Model, image: np.ndarray) -> Tuple[int, np.ndarray]:
    """
    单张图像预测

    Args:
        model: 模型
        image: 形状与模型输入一致的 (C, H, W) 图像

    Returns:
        (预测标签, 概率向量)
    """
    image = np.asarray(image)
    if tuple(image.shape) != model.input_shape:
        raise ShapeError(f"图像形状 {image.shape} 与模型输入 {model.input_shape} 不匹配")
    probs = softmax(model.logits(image[None])[0])
    return int(np.argmax(probs)), probs


def predict_labels(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """批量 top-1 预测"""
    return np.argmax(model.logits(images, batch_size), axis=1)
