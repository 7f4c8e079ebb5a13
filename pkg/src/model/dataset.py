"""
数据集模块
内置合成形状数据集生成器，以及 IDX 二进制与 PNG 类别目录两种外部格式的读取
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np
from matplotlib.colors import hsv_to_rgb
from PIL import Image, ImageDraw

from ..utils.errors import DatasetFormatError
from ..utils.file_handler import directory_scanner, file_processor

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class DatasetFormat(Enum):
    """数据集格式"""
    SYNTHETIC = "synthetic"
    IDX = "idx"
    PNG_DIR = "png_dir"


@dataclass
class Dataset:
    """带标签的图像集合，图像形状 (N, 3, H, W)，像素取值 [0,1]"""
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10
    ids: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.validate()

    def validate(self) -> None:
        """
        检查形状、像素范围与标签范围

        Raises:
            DatasetFormatError: 任一约束不满足
        """
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise DatasetFormatError(f"图像数组形状应为 (N, 3, H, W)，当前 {self.images.shape}")
        if len(self.labels) != len(self.images) or len(self.ids) != len(self.images):
            raise DatasetFormatError(f"图像数 {len(self.images)} 与标签数 {len(self.labels)} 不一致")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DatasetFormatError("像素值超出 [0,1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            bad = int(self.labels[(self.labels < 0) | (self.labels >= self.num_classes)][0])
            raise DatasetFormatError(f"标签越界: {bad}，类别数 {self.num_classes}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: np.ndarray, split: Optional[str] = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            images=self.images[indices],
            labels=self.labels[indices],
            split=split or self.split,
            num_classes=self.num_classes,
            ids=self.ids[indices],
        )

    def excluding_label(self, label: int) -> "Dataset":
        """去掉真实标签等于 label 的图像（目标攻击的图像池）"""
        return self.subset(np.flatnonzero(self.labels != label))

    def astype(self, dtype) -> "Dataset":
        return Dataset(self.images.astype(dtype), self.labels, self.split, self.num_classes, self.ids)


def split_dataset(dataset: Dataset, n_test: int, seed: int = 0) -> Tuple[Dataset, Dataset]:
    """
    按下标随机划分为互不相交的训练集与测试集

    Args:
        dataset: 原始数据集
        n_test: 测试集大小
        seed: 随机种子

    Returns:
        (训练集, 测试集)
    """
    if not 0 <= n_test <= len(dataset):
        raise DatasetFormatError(f"测试集大小 {n_test} 超出数据集大小 {len(dataset)}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    test_idx, train_idx = np.sort(order[:n_test]), np.sort(order[n_test:])
    return dataset.subset(train_idx, "train"), dataset.subset(test_idx, "test")


# ---------------------------------------------------------------------------
# 合成形状数据集
# ---------------------------------------------------------------------------

# 以 4 倍分辨率绘制后盒式缩小，得到抗锯齿的形状遮罩
_SUPERSAMPLE = 4


def _draw_circle(draw: ImageDraw.ImageDraw, cx: float, cy: float, r: float) -> None:
    draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)


def _draw_square(draw, cx, cy, r):
    h = 0.85 * r
    draw.rectangle([cx - h, cy - h, cx + h, cy + h], fill=255)


def _draw_triangle(draw, cx, cy, r):
    draw.polygon([(cx, cy - r), (cx + r, cy + r), (cx - r, cy + r)], fill=255)


def _draw_cross(draw, cx, cy, r):
    w = r / 3
    draw.rectangle([cx - w, cy - r, cx + w, cy + r], fill=255)
    draw.rectangle([cx - r, cy - w, cx + r, cy + w], fill=255)


def _draw_ring(draw, cx, cy, r):
    draw.ellipse([cx - r, cy - r, cx + r, cy + r], outline=255, width=max(1, int(0.4 * r)))


def _draw_diamond(draw, cx, cy, r):
    draw.polygon([(cx, cy - r), (cx + r, cy), (cx, cy + r), (cx - r, cy)], fill=255)


def _draw_hbar(draw, cx, cy, r):
    draw.rectangle([cx - r, cy - 0.35 * r, cx + r, cy + 0.35 * r], fill=255)


def _draw_vbar(draw, cx, cy, r):
    draw.rectangle([cx - 0.35 * r, cy - r, cx + 0.35 * r, cy + r], fill=255)


def _draw_x(draw, cx, cy, r):
    w = max(1, int(0.45 * r))
    draw.line([(cx - r, cy - r), (cx + r, cy + r)], fill=255, width=w)
    draw.line([(cx - r, cy + r), (cx + r, cy - r)], fill=255, width=w)


def _draw_half_disk(draw, cx, cy, r):
    draw.pieslice([cx - r, cy - r, cx + r, cy + r], 180, 360, fill=255)


SHAPE_PAINTERS: Dict[str, Callable] = {
    "circle": _draw_circle,
    "square": _draw_square,
    "triangle": _draw_triangle,
    "cross": _draw_cross,
    "ring": _draw_ring,
    "diamond": _draw_diamond,
    "hbar": _draw_hbar,
    "vbar": _draw_vbar,
    "x": _draw_x,
    "half_disk": _draw_half_disk,
}
SHAPE_NAMES = list(SHAPE_PAINTERS)


def _shape_mask(shape: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    big = size * _SUPERSAMPLE
    canvas = Image.new("L", (big, big), 0)
    SHAPE_PAINTERS[shape](ImageDraw.Draw(canvas), cx * _SUPERSAMPLE, cy * _SUPERSAMPLE, r * _SUPERSAMPLE)
    small = canvas.resize((size, size), Image.Resampling.BOX)
    return np.asarray(small, dtype=np.float64) / 255.0


def _textured_background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    freq = rng.uniform(0.15, 0.6, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(freq[0] * xx + freq[1] * yy + phase)
    tint = rng.uniform(0.25, 0.75, size=3)
    amplitude = rng.uniform(0.05, 0.15)
    background = tint[:, None, None] + amplitude * wave[None]
    return background + rng.normal(0.0, 0.03, size=(3, size, size))


def generate_synthetic(
    n: int,
    seed: int = 7,
    num_classes: int = 10,
    image_size: int = 32,
    split: str = "train"
) -> Dataset:
    """
    生成合成彩色形状数据集

    每个类别对应一种形状和一个色相，位置、大小、颜色深浅与纹理背景随机。
    类别均衡，同一种子得到逐位相同的结果。

    Args:
        n: 图像数量
        seed: 随机种子
        num_classes: 类别数（不超过 10）
        image_size: 图像边长
        split: 划分标记

    Returns:
        数据集
    """
    if not 1 <= num_classes <= len(SHAPE_NAMES):
        raise DatasetFormatError(f"合成数据集类别数必须在 1..{len(SHAPE_NAMES)} 之间: {num_classes}")
    if n < 0:
        raise DatasetFormatError(f"图像数量不能为负: {n}")

    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes)
    images = np.empty((n, 3, image_size, image_size), dtype=np.float64)

    for i, label in enumerate(labels):
        radius = rng.uniform(0.2, 0.32) * image_size
        margin = radius + 1.0
        cx, cy = rng.uniform(margin, image_size - margin, size=2)
        hue = (label / num_classes + rng.uniform(-0.02, 0.02)) % 1.0
        color = hsv_to_rgb([hue, rng.uniform(0.75, 1.0), rng.uniform(0.75, 1.0)])

        mask = _shape_mask(SHAPE_NAMES[label], image_size, cx, cy, radius)
        background = _textured_background(rng, image_size)
        image = background * (1.0 - mask) + color[:, None, None] * mask
        images[i] = np.clip(image, 0.0, 1.0)

    logger.info(f"生成合成数据集: {n} 张图像, {num_classes} 个类别, seed={seed}")
    return Dataset(images=images, labels=labels, split=split, num_classes=num_classes)


def load_generator_config(path: PathLike) -> Dict:
    """读取合成数据集生成器的 JSON 配置"""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"生成器配置解析失败: {path}: {e.msg}", offset=e.pos) from e
    if not isinstance(data, dict):
        raise DatasetFormatError(f"生成器配置顶层必须是对象: {path}")
    return data


# ---------------------------------------------------------------------------
# IDX 二进制格式
# ---------------------------------------------------------------------------

# 头部：两个零字节、类型码、维数，随后每维一个大端 uint32
_IDX_TYPES = {0x08: np.dtype('>u1'), 0x0D: np.dtype('>f4')}


def read_idx(path: PathLike) -> np.ndarray:
    """
    读取 IDX 文件

    Args:
        path: 文件路径

    Returns:
        原始数组（uint8 或 float32）

    Raises:
        DatasetFormatError: 文件结构错误，附带出错的字节偏移
    """
    payload = Path(path).read_bytes()
    if len(payload) < 4:
        raise DatasetFormatError(f"IDX 文件头不完整: {path}", offset=len(payload))
    if payload[0] != 0 or payload[1] != 0:
        raise DatasetFormatError(f"IDX 魔数错误: {path}", offset=0)
    type_code, ndim = payload[2], payload[3]
    if type_code not in _IDX_TYPES:
        raise DatasetFormatError(f"不支持的 IDX 数据类型 0x{type_code:02X}: {path}", offset=2)
    if ndim == 0:
        raise DatasetFormatError(f"IDX 维数为 0: {path}", offset=3)

    header_end = 4 + 4 * ndim
    if len(payload) < header_end:
        raise DatasetFormatError(f"IDX 维度表被截断: {path}", offset=len(payload))
    dims = struct.unpack(f">{ndim}I", payload[4:header_end])

    dtype = _IDX_TYPES[type_code]
    expected = int(np.prod(dims)) * dtype.itemsize
    actual = len(payload) - header_end
    if actual != expected:
        raise DatasetFormatError(
            f"IDX 数据长度 {actual} 与维度 {dims} 所需 {expected} 不符: {path}",
            offset=header_end + min(actual, expected)
        )
    data = np.frombuffer(payload, dtype=dtype, offset=header_end).reshape(dims)
    return data.astype(dtype.newbyteorder('='))


def write_idx(path: PathLike, array: np.ndarray) -> Path:
    """
    以 IDX 格式写出数组（uint8 或 float32）

    Args:
        path: 输出路径
        array: 数组

    Returns:
        输出路径
    """
    array = np.asarray(array)
    if array.dtype == np.uint8:
        type_code = 0x08
    elif array.dtype.kind == 'f':
        type_code, array = 0x0D, array.astype(np.float32)
    else:
        raise DatasetFormatError(f"IDX 仅支持 uint8 与 float32，当前 {array.dtype}")
    header = struct.pack(">BBBB", 0, 0, type_code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    return file_processor.atomic_write_bytes(path, header + array.astype(_IDX_TYPES[type_code]).tobytes())


def _images_from_idx(raw: np.ndarray, path: PathLike) -> np.ndarray:
    images = raw.astype(np.float64)
    if raw.dtype == np.uint8:
        images /= 255.0
    if images.ndim == 3:
        images = images[:, None]
    if images.ndim != 4 or images.shape[1] not in (1, 3):
        raise DatasetFormatError(f"IDX 图像数组形状不支持: {raw.shape} ({path})")
    if images.shape[1] == 1:
        images = np.repeat(images, 3, axis=1)
    return images


def _ingest_idx(path: Path, num_classes: int) -> Dataset:
    images_file, labels_file = path / "images.idx", path / "labels.idx"
    for required in (images_file, labels_file):
        if not required.exists():
            raise DatasetFormatError(f"缺少 IDX 文件: {required}")
    images = _images_from_idx(read_idx(images_file), images_file)
    labels = read_idx(labels_file)
    if labels.ndim != 1:
        raise DatasetFormatError(f"标签数组必须是一维: {labels.shape} ({labels_file})")
    return Dataset(images=images, labels=labels.astype(np.int64), num_classes=num_classes)


def _ingest_png_dir(path: Path, num_classes: Optional[int]) -> Dataset:
    scan = directory_scanner.scan_labeled_directory(path)
    for error in scan["errors"]:
        logger.warning(f"跳过无效图像: {error}")
    if not scan["files"]:
        raise DatasetFormatError(f"目录中没有有效的 PNG 图像: {path}")

    images, labels = [], []
    for file_path, label in scan["files"]:
        image = file_processor.load_image_png(file_path)
        if images and image.shape != images[0].shape:
            raise DatasetFormatError(f"图像尺寸不一致: {file_path} 为 {image.shape}，期望 {images[0].shape}")
        images.append(image)
        labels.append(label)
    num_classes = num_classes if num_classes is not None else max(labels) + 1
    return Dataset(images=np.stack(images), labels=np.asarray(labels), num_classes=num_classes)


def ingest_dataset(
    path: Optional[PathLike],
    fmt: Union[str, DatasetFormat] = DatasetFormat.SYNTHETIC,
    num_classes: Optional[int] = None,
    **synthetic_overrides
) -> Dataset:
    """
    按格式读取数据集

    Args:
        path: IDX 目录（含 images.idx / labels.idx）、PNG 类别目录，或合成生成器 JSON 配置（可为空）
        fmt: 数据集格式
        num_classes: 类别数，PNG 目录缺省时取最大标签 + 1
        **synthetic_overrides: 合成生成器参数（n、seed 等），覆盖配置文件

    Returns:
        校验过的数据集
    """
    fmt = DatasetFormat(fmt)
    if fmt == DatasetFormat.SYNTHETIC:
        params = load_generator_config(path) if path else {}
        params.update(synthetic_overrides)
        if num_classes is not None:
            params["num_classes"] = num_classes
        return generate_synthetic(**params)

    if path is None or not Path(path).exists():
        raise DatasetFormatError(f"数据集路径不存在: {path}")
    path = Path(path)
    if fmt == DatasetFormat.IDX:
        dataset = _ingest_idx(path, num_classes or 10)
    else:
        dataset = _ingest_png_dir(path, num_classes)
    logger.info(f"读取数据集: {path} ({fmt.value}), {len(dataset)} 张图像")
    return dataset
