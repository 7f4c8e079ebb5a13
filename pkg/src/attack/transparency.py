"""
半透明补丁
遮罩混合、补丁显眼度、补丁与遮罩的联合优化、γ 课程以及同等不透明度的对照补丁
"""
import logging
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .. import __version__
from ..diffcore import Tensor, add, backward, mean, mul, reshape, softmax_cross_entropy
from ..model.dataset import Dataset
from ..model.network import Model
from ..utils.errors import ConfigError, DivergenceError, NonFiniteError, PatchForgeError, PlacementError, ShapeError
from ..utils.file_handler import file_processor
from .geometry import TransformSpec, TransformSupport
from .patch import (
    SIDECAR_SCHEMA, AttackConfig, Patch, SaliencyProvider, attack_pool, compose_attacked_batch,
    draw_pool_batch, init_patch, optimize_patch, sample_specs
)

logger = logging.getLogger(__name__)

NON_CONVERGED_LOSS = 1.0


def _mask_values(mask: Union[Tensor, np.ndarray]) -> np.ndarray:
    return mask.values if isinstance(mask, Tensor) else np.asarray(mask)


def validate_mask(mask: Union[Tensor, np.ndarray], patch_shape: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    校验遮罩：形状 (1, P, Q)，数值在 [0,1]，与补丁空间尺寸一致

    Returns:
        遮罩数组
    """
    values = _mask_values(mask)
    if values.ndim != 3 or values.shape[0] != 1:
        raise ShapeError(f"遮罩形状必须为 (1, P, Q)，当前 {values.shape}")
    if patch_shape is not None and tuple(values.shape[1:]) != tuple(patch_shape[-2:]):
        raise ShapeError(f"遮罩尺寸 {values.shape[1:]} 与补丁尺寸 {tuple(patch_shape[-2:])} 不一致")
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("遮罩含 NaN 或无穷值")
    if values.min() < 0.0 or values.max() > 1.0:
        raise ShapeError(f"遮罩数值超出 [0,1]: [{values.min()}, {values.max()}]")
    return values


def patch_obtrusiveness(mask: Union[Tensor, np.ndarray]) -> float:
    """补丁显眼度：遮罩数值的算术平均"""
    return float(np.mean(validate_mask(mask), dtype=np.float64))


def image_relative_opacity(scale: float, obtrusiveness: float) -> float:
    """相对于整幅图像的不透明度：覆盖面积比例 × 显眼度"""
    return scale * scale * obtrusiveness


def blend_apply(
    image: Union[Tensor, np.ndarray],
    patch: Union[Tensor, np.ndarray],
    mask: Union[Tensor, np.ndarray],
    spec: TransformSpec
) -> Tensor:
    """
    按遮罩把补丁混合到单张图像上，补丁与遮罩使用同一变换

    Args:
        image: 形状 (C, H, W)，只作为常量参与
        patch: 形状 (C, P, Q)
        mask: 形状 (1, P, Q)
        spec: 变换

    Returns:
        攻击后图像 (C, H, W)，对补丁和遮罩均可求导
    """
    image = _mask_values(image)
    if image.ndim != 3:
        raise ShapeError(f"图像必须为 (C, H, W)，当前 {image.shape}")
    patch_shape = patch.shape
    validate_mask(mask, patch_shape)
    attacked = compose_attacked_batch(image[None], patch, [spec], mask)
    return reshape(attacked, image.shape)


def joint_loss(
    model: Model,
    attacked: Tensor,
    target: int,
    mask: Union[Tensor, np.ndarray],
    gamma: float
) -> Tuple[Tensor, Tensor, Tensor]:
    """
    联合损失 L_total = L_target + γ·PO(M)²

    Args:
        model: 模型
        attacked: 攻击后图像批
        target: 目标类别
        mask: 遮罩（未变换）
        gamma: 显眼度权重

    Returns:
        (L_total, L_target, L_PO)
    """
    if gamma < 0 or not math.isfinite(gamma):
        raise ConfigError(f"γ 必须为非负有限数: {gamma}")
    target_loss = softmax_cross_entropy(model.forward(attacked), target)
    obtrusiveness = mean(mask)
    po_loss = mul(obtrusiveness, obtrusiveness)
    total = add(target_loss, mul(po_loss, gamma))
    if not np.isfinite(total.item()):
        raise NonFiniteError(f"联合损失非有限: L_target={target_loss.item()}, L_PO={po_loss.item()}")
    return total, target_loss, po_loss


@dataclass(frozen=True)
class GammaSchedule:
    """
    γ 课程：损失连续 patience 次低于阈值后 γ 按 decay 衰减，直到 floor
    """
    gamma: float = 10.0
    decay: float = 0.5
    threshold: float = 0.1
    patience: int = 5
    floor: float = 1e-3
    stage: int = 0
    counter: int = 0

    def __post_init__(self):
        if self.gamma < 0 or not 0 < self.decay < 1:
            raise ConfigError(f"γ 课程参数无效: gamma={self.gamma}, decay={self.decay}")
        if self.patience <= 0 or self.floor < 0:
            raise ConfigError(f"γ 课程参数无效: patience={self.patience}, floor={self.floor}")

    @classmethod
    def from_config(cls, section: Mapping[str, Any]) -> "GammaSchedule":
        return cls(
            gamma=float(section.get("gamma_initial", 10.0)),
            decay=float(section.get("gamma_decay", 0.5)),
            threshold=float(section.get("loss_threshold", 0.1)),
            patience=int(section.get("patience", 5)),
            floor=float(section.get("gamma_floor", 1e-3)),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "gamma": self.gamma, "decay": self.decay, "threshold": self.threshold,
            "patience": self.patience, "floor": self.floor, "stage": self.stage, "counter": self.counter,
        }


def gamma_step(schedule: GammaSchedule, target_loss: float) -> GammaSchedule:
    """
    按本次目标损失推进 γ 课程

    Args:
        schedule: 当前课程状态
        target_loss: 本次迭代的 L_target

    Returns:
        新的课程状态
    """
    counter = schedule.counter + 1 if target_loss < schedule.threshold else 0
    if counter < schedule.patience:
        return replace(schedule, counter=counter)
    gamma = max(schedule.gamma * schedule.decay, schedule.floor)
    stage = schedule.stage + 1 if gamma < schedule.gamma else schedule.stage
    return replace(schedule, gamma=gamma, stage=stage, counter=0)


def detect_loss_spikes(
    target_trace: Sequence[float],
    gamma_trace: Sequence[float],
    threshold: float = 0.1,
    window: int = 3
) -> Tuple[int, int]:
    """
    统计 γ 衰减次数以及其后 window 次迭代内目标损失回升到阈值以上的次数

    gamma_trace[k] 为第 k 次迭代使用的 γ。

    Returns:
        (衰减次数, 伴随回升的衰减次数)
    """
    if len(target_trace) != len(gamma_trace):
        raise ShapeError(f"损失轨迹长度 {len(target_trace)} 与 γ 轨迹长度 {len(gamma_trace)} 不一致")
    decays = spikes = 0
    for k in range(1, len(gamma_trace)):
        if gamma_trace[k] < gamma_trace[k - 1]:
            decays += 1
            if any(loss >= threshold for loss in target_trace[k:k + window]):
                spikes += 1
    return decays, spikes


@dataclass
class TransparentConfig:
    """联合优化配置"""
    iterations: int = 1200
    learning_rate: float = 5.0
    batch_images: int = 16
    transforms_per_image: int = 4
    patch_size: int = 16
    init_low: float = 0.4
    init_high: float = 0.6
    mask_init: float = 0.9
    seed: int = 0
    support: TransformSupport = field(default_factory=TransformSupport)
    schedule: GammaSchedule = field(default_factory=GammaSchedule)
    control_iterations: int = 500
    dtype: str = "float32"

    def __post_init__(self):
        if self.iterations < 0 or self.control_iterations < 0:
            raise ConfigError(f"迭代次数不能为负: {self.iterations}, {self.control_iterations}")
        if not 0.0 <= self.mask_init <= 1.0:
            raise ConfigError(f"遮罩初值必须在 [0,1]: {self.mask_init}")
        if self.learning_rate < 0 or self.batch_images <= 0 or self.transforms_per_image <= 0:
            raise ConfigError("learning_rate 不能为负，batch_images 与 transforms_per_image 必须为正")

    @classmethod
    def from_config(cls, section: Mapping[str, Any], **overrides) -> "TransparentConfig":
        """由配置文件 transparency 段构造"""
        support = TransformSupport(
            theta_max=float(section.get("theta_max", 0.0)),
            scale_low=float(section.get("scale_low", 0.4)),
            scale_high=float(section.get("scale_high", 0.5)),
            location=section.get("location", "random"),
        )
        params = {
            key: section[key]
            for key in ("iterations", "learning_rate", "batch_images", "transforms_per_image", "patch_size",
                        "init_low", "init_high", "mask_init", "seed", "control_iterations")
            if key in section
        }
        params.update(support=support, schedule=GammaSchedule.from_config(section))
        params.update(overrides)
        return cls(**params)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "iterations": self.iterations,
            "learning_rate": self.learning_rate,
            "batch_images": self.batch_images,
            "transforms_per_image": self.transforms_per_image,
            "patch_size": self.patch_size,
            "init_low": self.init_low,
            "init_high": self.init_high,
            "mask_init": self.mask_init,
            "seed": self.seed,
            "support": self.support.to_dict(),
            "schedule": self.schedule.to_dict(),
            "control_iterations": self.control_iterations,
            "dtype": self.dtype,
        }


@dataclass
class TransparentPatch:
    """联合优化产物"""
    patch: Patch
    mask: np.ndarray
    obtrusiveness: float
    target_trace: List[float]
    po_trace: List[float]
    gamma_trace: List[float]
    converged: bool

    def sidecar(self) -> Dict[str, Any]:
        decays, spikes = detect_loss_spikes(self.target_trace, self.gamma_trace,
                                            self.patch.config.get("schedule", {}).get("threshold", 0.1))
        return {
            "schema_version": SIDECAR_SCHEMA,
            "toolkit_version": __version__,
            "target": self.patch.target,
            "obtrusiveness": self.obtrusiveness,
            "converged": self.converged,
            "gamma": {
                "initial": self.gamma_trace[0] if self.gamma_trace else None,
                "final": self.gamma_trace[-1] if self.gamma_trace else None,
                "decays": decays,
                "spikes": spikes,
            },
            "target_trace": [float(v) for v in self.target_trace],
            "po_trace": [float(v) for v in self.po_trace],
            "gamma_trace": [float(v) for v in self.gamma_trace],
            "support": self.patch.support.to_dict(),
            "config": self.patch.config,
            "seed": self.patch.seed,
        }


def optimize_transparent(
    model: Model,
    target: int,
    pool: Dataset,
    config: TransparentConfig,
    saliency_provider: Optional[SaliencyProvider] = None,
    progress: bool = True
) -> TransparentPatch:
    """
    补丁与遮罩的联合投影梯度下降

    每次迭代按 L_total 同步更新补丁和遮罩并截断到 [0,1]，随后用本次 L_target 推进 γ 课程。
    到达迭代上限即停止；末次 L_target 仍高于 1.0 时标记为未收敛，产物照常返回。

    Args:
        model: 模型
        target: 目标类别
        pool: 图像池（目标类别图像会被排除）
        config: 优化配置
        saliency_provider: 显著性放置策略所需
        progress: 是否显示进度条

    Returns:
        联合优化产物
    """
    pool = attack_pool(pool, target)
    checksum = model.checksum()
    rng = np.random.default_rng(config.seed)
    images = pool.images.astype(config.dtype, copy=False)
    pixels = init_patch(rng, config.patch_size, config.init_low, config.init_high, images.shape[1], config.dtype)
    mask = np.full((1, config.patch_size, config.patch_size), config.mask_init, dtype=config.dtype)
    schedule = config.schedule
    target_trace: List[float] = []
    po_trace: List[float] = []
    gamma_trace: List[float] = []
    lr = config.learning_rate

    bar = tqdm(range(config.iterations), desc=f"transparent→{target}", leave=False,
               disable=not progress or not sys.stderr.isatty())
    for iteration in bar:
        idx = draw_pool_batch(pool, config.batch_images, rng)
        specs = sample_specs(config.support, images[idx], pool.ids[idx], pool.labels[idx], pixels.shape,
                             rng, config.transforms_per_image, saliency_provider)
        batch = np.repeat(images[idx], config.transforms_per_image, axis=0)

        patch_t = Tensor(pixels, requires_grad=True)
        mask_t = Tensor(mask, requires_grad=True)
        try:
            attacked = compose_attacked_batch(batch, patch_t, specs, mask_t)
            total, target_loss, po_loss = joint_loss(model, attacked, target, mask_t, schedule.gamma)
        except NonFiniteError as exc:
            raise DivergenceError(f"联合优化发散: 第 {iteration} 次迭代 ({exc})",
                                  iteration=iteration, learning_rate=lr) from exc
        backward(total)

        for tensor in (patch_t, mask_t):
            if tensor.grad is None:
                tensor.grad = np.zeros_like(tensor.values)
        pixels = np.clip(pixels - lr * patch_t.grad, 0.0, 1.0).astype(config.dtype)
        mask = np.clip(mask - lr * mask_t.grad, 0.0, 1.0).astype(config.dtype)

        gamma_trace.append(schedule.gamma)
        target_trace.append(target_loss.item())
        po_trace.append(po_loss.item())
        schedule = gamma_step(schedule, target_trace[-1])
        bar.set_postfix(loss=f"{target_trace[-1]:.4f}", gamma=f"{gamma_trace[-1]:.3g}")

    if model.checksum() != checksum:
        raise PatchForgeError("联合优化期间模型参数发生了变化")

    converged = not target_trace or target_trace[-1] <= NON_CONVERGED_LOSS
    obtrusiveness = patch_obtrusiveness(mask)
    if not converged:
        logger.warning(f"目标 {target}: 联合优化未收敛，末次 L_target={target_trace[-1]:.4f}")
    logger.info(f"目标 {target} 半透明补丁完成: PO={obtrusiveness:.4f}, 末次 γ={schedule.gamma:.4g}, 阶段 {schedule.stage}")

    patch = Patch(
        pixels=pixels,
        target=int(target),
        support=config.support,
        config=config.to_dict(),
        loss_curve=target_trace,
        seed=config.seed,
        metadata={"converged": converged, "obtrusiveness": obtrusiveness, "model_checksum": checksum},
    )
    return TransparentPatch(
        patch=patch,
        mask=mask,
        obtrusiveness=obtrusiveness,
        target_trace=target_trace,
        po_trace=po_trace,
        gamma_trace=gamma_trace,
        converged=converged,
    )


def matched_control_scale(obtrusiveness: float, semi_scale: float, edge: int) -> float:
    """
    与半透明补丁相对图像不透明度相同的不透明补丁缩放比例 s·√PO

    Raises:
        PlacementError: PO 不在 (0,1] 内或对照补丁边长不足 1 像素
    """
    if not 0.0 < obtrusiveness <= 1.0:
        raise PlacementError(f"显眼度必须在 (0,1] 内: {obtrusiveness}", scale=semi_scale)
    scale = semi_scale * math.sqrt(obtrusiveness)
    if scale * edge < 1.0:
        raise PlacementError(f"对照补丁边长 {scale * edge:.3f}px 不足 1 像素", scale=scale)
    return scale


def opacity_matched(semi_scale: float, obtrusiveness: float, control_scale: float, edge: int) -> bool:
    """两者的等效不透明边长相差不超过 1 像素"""
    semi_side = math.sqrt(image_relative_opacity(semi_scale, obtrusiveness)) * edge
    control_side = math.sqrt(image_relative_opacity(control_scale, 1.0)) * edge
    return abs(semi_side - control_side) <= 1.0


def make_opacity_matched_control(
    obtrusiveness: float,
    semi_support: TransformSupport,
    edge: int,
    config: Optional[TransparentConfig] = None
) -> AttackConfig:
    """
    构造同等不透明度的不透明对照补丁配置

    缩放区间两端分别乘 √PO，其余变换设置保持一致。

    Args:
        obtrusiveness: 半透明补丁的显眼度
        semi_support: 半透明补丁的训练支撑集
        edge: 图像边长
        config: 半透明补丁的联合优化配置，提供种子、批大小等

    Returns:
        不透明对照的优化配置
    """
    config = config or TransparentConfig()
    low = matched_control_scale(obtrusiveness, semi_support.scale_low, edge)
    high = matched_control_scale(obtrusiveness, semi_support.scale_high, edge)
    support = replace(semi_support, scale_low=low, scale_high=high)
    return AttackConfig(
        iterations=config.control_iterations,
        learning_rate=config.learning_rate,
        batch_images=config.batch_images,
        transforms_per_image=config.transforms_per_image,
        patch_size=config.patch_size,
        init_low=config.init_low,
        init_high=config.init_high,
        seed=config.seed,
        support=support,
        dtype=config.dtype,
    )


def optimize_opacity_matched_control(
    model: Model,
    semi: TransparentPatch,
    pool: Dataset,
    config: Optional[TransparentConfig] = None,
    saliency_provider: Optional[SaliencyProvider] = None,
    progress: bool = True
) -> Patch:
    """为半透明补丁训练同等不透明度的不透明对照补丁"""
    edge = min(pool.image_shape[-2:])
    control_config = make_opacity_matched_control(semi.obtrusiveness, semi.patch.support, edge, config)
    control = optimize_patch(model, semi.patch.target, pool, control_config, saliency_provider, progress)
    control.metadata["matched_obtrusiveness"] = semi.obtrusiveness
    return control


def save_mask_bundle(result: TransparentPatch, directory: Union[str, Path], stem: str = "transparent") -> Dict[str, str]:
    """保存补丁 PNG、遮罩灰度 PNG、精确数值 .npy 与 JSON 旁注"""
    directory = Path(directory)
    paths = {
        "patch_png": file_processor.save_image_png(result.patch.pixels, directory / f"{stem}_patch.png"),
        "patch_npy": file_processor.save_array(result.patch.pixels, directory / f"{stem}_patch.npy"),
        "mask_png": file_processor.save_image_png(result.mask, directory / f"{stem}_mask.png"),
        "mask_npy": file_processor.save_array(result.mask, directory / f"{stem}_mask.npy"),
        "json": file_processor.write_json(result.sidecar(), directory / f"{stem}.json"),
    }
    return {key: str(value) for key, value in paths.items()}


def load_mask_bundle(directory: Union[str, Path], stem: str = "transparent") -> TransparentPatch:
    """读取 save_mask_bundle 写出的产物"""
    directory = Path(directory)
    sidecar = file_processor.read_json(directory / f"{stem}.json")
    if sidecar.get("schema_version") != SIDECAR_SCHEMA:
        raise PatchForgeError(f"旁注版本不受支持: {sidecar.get('schema_version')}")
    support = TransformSupport.from_dict(sidecar["support"])
    patch = Patch(
        pixels=file_processor.load_array(directory / f"{stem}_patch.npy"),
        target=int(sidecar["target"]),
        support=support,
        config=sidecar.get("config", {}),
        loss_curve=list(sidecar.get("target_trace", [])),
        seed=int(sidecar.get("seed", 0)),
        metadata={"converged": sidecar.get("converged"), "obtrusiveness": sidecar.get("obtrusiveness")},
    )
    return TransparentPatch(
        patch=patch,
        mask=file_processor.load_array(directory / f"{stem}_mask.npy"),
        obtrusiveness=float(sidecar["obtrusiveness"]),
        target_trace=list(sidecar.get("target_trace", [])),
        po_trace=list(sidecar.get("po_trace", [])),
        gamma_trace=list(sidecar.get("gamma_trace", [])),
        converged=bool(sidecar.get("converged", True)),
    )
