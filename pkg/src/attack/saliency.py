"""
显著性图与基于显著性的放置策略
"""
import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Dict, Optional, Tuple, Union

import numpy as np

from ..diffcore import Tensor, backward, pick, sum as tensor_sum
from ..utils.errors import NonFiniteError, PlacementError, ShapeError
from ..utils.file_handler import file_processor

if TYPE_CHECKING:
    from ..model.network import Model

logger = logging.getLogger(__name__)

STRATEGIES = ("min", "max", "random")


@dataclass
class SaliencyMap:
    """逐像素非负重要性 (H, W)"""
    values: np.ndarray
    image_id: Optional[int] = None
    label: Optional[int] = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise NonFiniteError("显著性图必须有限且非负")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


def compute_saliency(
    model: "Model",
    image: np.ndarray,
    true_label: int,
    image_id: Optional[int] = None
) -> SaliencyMap:
    """
    计算真实类别 softmax 前得分对输入的梯度幅值，通道间取最大值

    Args:
        model: 模型
        image: 形状 (C, H, W)
        true_label: 真实标签
        image_id: 图像编号

    Returns:
        显著性图
    """
    if not 0 <= true_label < model.num_classes:
        raise ShapeError(f"标签 {true_label} 超出类别数 {model.num_classes}")
    x = Tensor(np.asarray(image), requires_grad=True, dtype=model.dtype)
    score = tensor_sum(pick(model.forward(x), true_label))
    backward(score)
    grad = np.zeros(x.shape) if x.grad is None else x.grad
    values = np.max(np.abs(grad), axis=0).astype(np.float64)
    return SaliencyMap(values=values, image_id=image_id, label=int(true_label))


def integral_image(values: np.ndarray) -> np.ndarray:
    """首行首列补零的积分图，形状 (H+1, W+1)"""
    values = np.asarray(values, dtype=np.float64)
    table = np.zeros((values.shape[0] + 1, values.shape[1] + 1))
    table[1:, 1:] = values.cumsum(axis=0).cumsum(axis=1)
    return table


def box_sums(values: np.ndarray, box_h: int, box_w: int) -> np.ndarray:
    """
    所有合法放置位置上的框内求和

    Args:
        values: 二维图
        box_h: 框高
        box_w: 框宽

    Returns:
        形状 (H − box_h + 1, W − box_w + 1)，[r, c] 为左上角在 (r, c) 的框内和
    """
    values = np.asarray(values)
    height, width = values.shape
    if not (1 <= box_h <= height and 1 <= box_w <= width):
        raise PlacementError(f"框 {box_h}×{box_w} 无法放入 {height}×{width} 的图中")
    table = integral_image(values)
    return (table[box_h:, box_w:] - table[:-box_h, box_w:]
            - table[box_h:, :-box_w] + table[:-box_h, :-box_w])


def select_location(
    saliency: Union[SaliencyMap, np.ndarray],
    box: Tuple[int, int],
    strategy: str,
    rng: Optional[np.random.Generator] = None
) -> Tuple[int, int]:
    """
    选择补丁左上角位置

    max / min 取框内显著性之和最大 / 最小的位置，并列时取 (row, col) 字典序最小者；
    random 在所有合法位置上均匀选取。

    Args:
        saliency: 显著性图
        box: 补丁外接框 (高, 宽)
        strategy: "min"、"max" 或 "random"
        rng: 随机数生成器（random 策略必需）

    Returns:
        (row, col)
    """
    values = saliency.values if isinstance(saliency, SaliencyMap) else np.asarray(saliency)
    box_h, box_w = int(box[0]), int(box[1])
    if strategy not in STRATEGIES:
        raise ShapeError(f"未知放置策略: {strategy}")

    if strategy == "random":
        if rng is None:
            raise ShapeError("random 策略需要随机数生成器")
        height, width = values.shape
        if box_h > height or box_w > width:
            raise PlacementError(f"框 {box_h}×{box_w} 无法放入 {height}×{width} 的图中")
        return int(rng.integers(0, height - box_h + 1)), int(rng.integers(0, width - box_w + 1))

    sums = box_sums(values, box_h, box_w)
    extreme = sums.max() if strategy == "max" else sums.min()
    # 积分图相减的舍入误差内视为并列
    tol = 1e-9 * max(1.0, abs(extreme))
    tied = np.abs(sums - extreme) <= tol
    row, col = np.unravel_index(np.argmax(tied), sums.shape)
    return int(row), int(col)


class SaliencyCache:
    """按图像编号缓存显著性图，可被多个线程共享"""

    def __init__(self, model: "Model"):
        self.model = model
        self._maps: Dict[int, np.ndarray] = {}
        self._lock = threading.Lock()

    def __call__(self, image_id: int, image: np.ndarray, label: int) -> np.ndarray:
        with self._lock:
            cached = self._maps.get(int(image_id))
        if cached is not None:
            return cached
        values = compute_saliency(self.model, image, int(label), int(image_id)).values
        with self._lock:
            return self._maps.setdefault(int(image_id), values)

    def __len__(self) -> int:
        with self._lock:
            return len(self._maps)


def save_saliency_png(saliency: Union[SaliencyMap, np.ndarray], path: Union[str, Path]) -> Path:
    """按最大值归一化后保存为灰度 PNG"""
    values = saliency.values if isinstance(saliency, SaliencyMap) else np.asarray(saliency)
    peak = values.max() if values.size else 0.0
    normalized = values / peak if peak > 0 else np.zeros_like(values)
    return file_processor.save_image_png(normalized, path)
