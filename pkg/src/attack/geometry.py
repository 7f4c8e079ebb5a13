"""
补丁几何变换
变换分布（旋转、缩放、放置位置）的采样，以及把补丁/遮罩按变换重采样到图像画布上的可微实现
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ..diffcore import BilinearSampler, Tensor, as_tensor, bilinear_sample, clamp, lerp, reshape
from ..utils.errors import ConfigError, PlacementError, ShapeError
from .saliency import select_location

logger = logging.getLogger(__name__)

_EPS = 1e-12


class LocationStrategy(Enum):
    """放置策略"""
    RANDOM = "random"
    SALIENCY_MIN = "saliency_min"
    SALIENCY_MAX = "saliency_max"
    FIXED = "fixed"


@dataclass(frozen=True)
class TransformSupport:
    """
    变换分布的支撑集

    旋转角在 [theta_offset − theta_max, theta_offset + theta_max] 上均匀分布，
    缩放比例（补丁边长占图像边长的比例）在 [scale_low, scale_high] 上均匀分布。
    """
    theta_max: float = 0.0
    scale_low: float = 0.4
    scale_high: float = 0.5
    location: LocationStrategy = LocationStrategy.RANDOM
    fixed_position: Optional[Tuple[int, int]] = None
    theta_offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "location", LocationStrategy(self.location))
        if self.fixed_position is not None:
            object.__setattr__(self, "fixed_position", tuple(int(v) for v in self.fixed_position))
        if not 0.0 <= self.theta_max <= math.pi + _EPS:
            raise ConfigError(f"theta_max 必须在 [0, π] 内: {self.theta_max}")
        if not 0.0 < self.scale_low <= self.scale_high <= 1.0:
            raise ConfigError(f"缩放范围必须满足 0 < low ≤ high ≤ 1: [{self.scale_low}, {self.scale_high}]")
        if self.location == LocationStrategy.FIXED and self.fixed_position is None:
            raise ConfigError("固定放置策略需要 fixed_position")

    @property
    def theta_low(self) -> float:
        return self.theta_offset - self.theta_max

    @property
    def theta_high(self) -> float:
        return self.theta_offset + self.theta_max

    def contains(self, spec: "TransformSpec", tol: float = 1e-9) -> bool:
        """具体变换是否落在支撑集内"""
        if not self.theta_low - tol <= spec.theta <= self.theta_high + tol:
            return False
        if not self.scale_low - tol <= spec.scale <= self.scale_high + tol:
            return False
        if self.location == LocationStrategy.FIXED:
            return (spec.row, spec.col) == self.fixed_position
        return True

    def is_subset_of(self, other: "TransformSupport", tol: float = 1e-9) -> bool:
        """
        判断是否为另一支撑集的子集（约束 EoT 要求训练支撑 ⊆ 测试支撑）

        位置维度上，随机放置覆盖一切策略，其余策略只包含自身。
        """
        theta_ok = other.theta_low - tol <= self.theta_low and self.theta_high <= other.theta_high + tol
        scale_ok = other.scale_low - tol <= self.scale_low and self.scale_high <= other.scale_high + tol
        location_ok = other.location == LocationStrategy.RANDOM or (
            other.location == self.location and other.fixed_position == self.fixed_position
        )
        return theta_ok and scale_ok and location_ok

    def to_dict(self) -> Dict[str, Any]:
        return {
            "theta_max": self.theta_max,
            "theta_offset": self.theta_offset,
            "scale_low": self.scale_low,
            "scale_high": self.scale_high,
            "location": self.location.value,
            "fixed_position": list(self.fixed_position) if self.fixed_position else None,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TransformSupport":
        return cls(
            theta_max=float(data.get("theta_max", 0.0)),
            scale_low=float(data.get("scale_low", 0.4)),
            scale_high=float(data.get("scale_high", 0.5)),
            location=LocationStrategy(data.get("location", "random")),
            fixed_position=tuple(data["fixed_position"]) if data.get("fixed_position") else None,
            theta_offset=float(data.get("theta_offset", 0.0)),
        )

    def describe(self) -> str:
        return (f"θ∈[{self.theta_low:.4g}, {self.theta_high:.4g}], "
                f"s∈[{self.scale_low:.4g}, {self.scale_high:.4g}], {self.location.value}")


@dataclass(frozen=True)
class TransformSpec:
    """一次采样得到的具体变换：旋转角、缩放比例与外接框左上角位置"""
    theta: float
    scale: float
    row: int
    col: int

    def to_dict(self) -> Dict[str, Any]:
        return {"theta": self.theta, "scale": self.scale, "row": self.row, "col": self.col}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TransformSpec":
        return cls(float(data["theta"]), float(data["scale"]), int(data["row"]), int(data["col"]))


def image_edge(canvas_shape: Sequence[int]) -> int:
    """缩放比例参照的图像边长（取 H、W 中较短者）"""
    return int(min(canvas_shape[-2], canvas_shape[-1]))


def footprint_box(theta: float, scale: float, edge: int) -> int:
    """
    旋转后补丁外接正方形的边长（像素）

    Args:
        theta: 旋转角
        scale: 补丁边长占图像边长的比例
        edge: 图像边长

    Returns:
        外接框边长，至少为 1
    """
    side = scale * edge
    extent = side * (abs(math.cos(theta)) + abs(math.sin(theta)))
    return max(1, math.ceil(extent - 1e-9))


def check_placement(spec: TransformSpec, canvas_shape: Sequence[int]) -> int:
    """
    校验外接框完全位于画布内

    Returns:
        外接框边长

    Raises:
        PlacementError: 超出边界
    """
    height, width = canvas_shape[-2], canvas_shape[-1]
    box = footprint_box(spec.theta, spec.scale, image_edge(canvas_shape))
    if spec.row < 0 or spec.col < 0 or spec.row + box > height or spec.col + box > width:
        raise PlacementError(
            f"补丁外接框 {box}px 在 ({spec.row}, {spec.col}) 处超出画布 {height}×{width}",
            scale=spec.scale,
        )
    return box


def sample_transform(
    support: TransformSupport,
    image_shape: Sequence[int],
    patch_shape: Sequence[int],
    rng: np.random.Generator,
    saliency: Optional[np.ndarray] = None
) -> TransformSpec:
    """
    从支撑集采样一个变换

    Args:
        support: 支撑集
        image_shape: 图像形状 (C, H, W) 或 (H, W)
        patch_shape: 补丁形状 (C, P, P)
        rng: 随机数生成器
        saliency: 显著性图，saliency_min / saliency_max 策略必需

    Returns:
        变换

    Raises:
        PlacementError: 该缩放比例下图像内没有合法位置
    """
    if patch_shape[-1] != patch_shape[-2]:
        raise ShapeError(f"补丁必须为正方形: {tuple(patch_shape)}")
    height, width = image_shape[-2], image_shape[-1]

    theta = support.theta_offset + rng.uniform(-support.theta_max, support.theta_max)
    scale = rng.uniform(support.scale_low, support.scale_high)
    box = footprint_box(theta, scale, image_edge(image_shape))
    if box > height or box > width:
        raise PlacementError(f"缩放比例 {scale:.4f} 下补丁外接框 {box}px 大于图像 {height}×{width}", scale=scale)

    if support.location == LocationStrategy.RANDOM:
        row = int(rng.integers(0, height - box + 1))
        col = int(rng.integers(0, width - box + 1))
    elif support.location == LocationStrategy.FIXED:
        row, col = support.fixed_position
    else:
        if saliency is None:
            raise ConfigError(f"{support.location.value} 策略需要显著性图")
        strategy = "max" if support.location == LocationStrategy.SALIENCY_MAX else "min"
        row, col = select_location(saliency, (box, box), strategy, rng)

    spec = TransformSpec(theta=float(theta), scale=float(scale), row=int(row), col=int(col))
    check_placement(spec, image_shape)
    return spec


def _sampling_table(
    spec: TransformSpec,
    patch_hw: Tuple[int, int],
    canvas_hw: Tuple[int, int]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """单个变换的逆映射采样表：(画布平面下标, 四个源像素下标, 双线性权重)"""
    rows_p, cols_p = patch_hw
    height, width = canvas_hw
    box = check_placement(spec, canvas_hw)
    side = spec.scale * image_edge(canvas_hw)
    center_y = spec.row + box / 2.0
    center_x = spec.col + box / 2.0

    ii, jj = np.mgrid[spec.row:spec.row + box, spec.col:spec.col + box]
    dy = ii + 0.5 - center_y
    dx = jj + 0.5 - center_x
    cos_t, sin_t = math.cos(spec.theta), math.sin(spec.theta)
    # 画布偏移逆旋转回补丁坐标系
    px = cos_t * dx + sin_t * dy
    py = -sin_t * dx + cos_t * dy
    u = py * (rows_p / side) + rows_p / 2.0 - 0.5
    v = px * (cols_p / side) + cols_p / 2.0 - 0.5

    inside = (u >= -0.5) & (u < rows_p - 0.5) & (v >= -0.5) & (v < cols_p - 0.5)
    u, v = u[inside], v[inside]
    u0, v0 = np.floor(u), np.floor(v)
    fu, fv = u - u0, v - v0
    # 越界的邻点钳到补丁边缘
    r0 = np.clip(u0, 0, rows_p - 1).astype(np.int64)
    r1 = np.clip(u0 + 1, 0, rows_p - 1).astype(np.int64)
    c0 = np.clip(v0, 0, cols_p - 1).astype(np.int64)
    c1 = np.clip(v0 + 1, 0, cols_p - 1).astype(np.int64)

    taps = np.stack([r0 * cols_p + c0, r0 * cols_p + c1, r1 * cols_p + c0, r1 * cols_p + c1], axis=1)
    weights = np.stack([(1 - fu) * (1 - fv), (1 - fu) * fv, fu * (1 - fv), fu * fv], axis=1)
    dst = ii[inside] * width + jj[inside]
    return dst, taps, weights


def build_sampler(
    specs: Sequence[TransformSpec],
    patch_hw: Tuple[int, int],
    canvas_hw: Tuple[int, int]
) -> Tuple[BilinearSampler, np.ndarray]:
    """
    为一组变换构建合并的采样表

    Args:
        specs: 变换列表
        patch_hw: 补丁空间尺寸
        canvas_hw: 画布空间尺寸

    Returns:
        (采样表, 形状 (K, H, W) 的覆盖区域布尔图)
    """
    height, width = canvas_hw
    plane = height * width
    footprint = np.zeros((len(specs), height, width), dtype=bool)
    dst_parts, tap_parts, weight_parts = [], [], []
    for k, spec in enumerate(specs):
        dst, taps, weights = _sampling_table(spec, patch_hw, canvas_hw)
        footprint[k].flat[dst] = True
        dst_parts.append(dst + k * plane)
        tap_parts.append(taps)
        weight_parts.append(weights)

    sampler = BilinearSampler(
        src_shape=tuple(patch_hw),
        out_shape=(len(specs), height, width),
        dst=np.concatenate(dst_parts) if dst_parts else np.zeros(0, dtype=np.int64),
        taps=np.concatenate(tap_parts) if tap_parts else np.zeros((0, 4), dtype=np.int64),
        weights=np.concatenate(weight_parts) if weight_parts else np.zeros((0, 4)),
    )
    return sampler, footprint


def warp_batch(
    patch: Union[Tensor, np.ndarray],
    specs: Sequence[TransformSpec],
    canvas_shape: Sequence[int]
) -> Tuple[Tensor, np.ndarray]:
    """
    同一补丁按多个变换重采样，作为一个算子记录

    Args:
        patch: 形状 (C, P, Q)
        specs: 变换列表
        canvas_shape: 画布形状 (..., H, W)

    Returns:
        (形状 (K, C, H, W) 的画布, 形状 (K, H, W) 的覆盖区域)
    """
    patch = as_tensor(patch)
    if patch.ndim != 3:
        raise ShapeError(f"补丁必须为三维 (C, P, Q)，当前 {patch.shape}")
    canvas_hw = (int(canvas_shape[-2]), int(canvas_shape[-1]))
    sampler, footprint = build_sampler(specs, patch.shape[1:], canvas_hw)
    return bilinear_sample(patch, sampler), footprint


def warp_patch(
    patch: Union[Tensor, np.ndarray],
    spec: TransformSpec,
    canvas_shape: Sequence[int]
) -> Tuple[Tensor, np.ndarray]:
    """
    按单个变换把补丁（或遮罩）重采样到画布

    旋转绕补丁中心，边长缩放为 scale·图像边长，放在 spec 指定的外接框内。
    对补丁和遮罩使用同一 spec 时输出逐像素对齐。

    Returns:
        (形状 (C, H, W) 的画布, 形状 (H, W) 的覆盖区域)
    """
    canvas, footprint = warp_batch(patch, [spec], canvas_shape)
    return reshape(canvas, canvas.shape[1:]), footprint[0]


def apply_patch_opaque(
    image: Union[Tensor, np.ndarray],
    patch: Union[Tensor, np.ndarray],
    spec: TransformSpec
) -> Tensor:
    """
    不透明贴片：覆盖区域内像素替换为变换后的补丁，区域外逐位不变

    Args:
        image: 形状 (C, H, W)
        patch: 形状 (C, P, Q)
        spec: 变换

    Returns:
        攻击后的图像
    """
    image = as_tensor(image)
    canvas, footprint = warp_patch(patch, spec, image.shape)
    if canvas.shape != image.shape:
        raise ShapeError(f"画布 {canvas.shape} 与图像 {image.shape} 形状不一致")
    alpha = footprint.astype(image.dtype)[None]
    return clamp(lerp(image, canvas, alpha))
