"""
不透明补丁的 EoT 优化与评估
在变换分布与图像池上最小化目标类别交叉熵（即最大化目标类别概率），并统计目标攻击成功率
"""
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .. import __version__
from ..diffcore import Tensor, backward, clamp, lerp, no_grad, softmax_cross_entropy
from ..model.dataset import Dataset
from ..model.network import Model
from ..utils.errors import ConfigError, DivergenceError, EmptyPoolError, PatchForgeError, ShapeError
from ..utils.file_handler import file_processor
from .geometry import TransformSpec, TransformSupport, sample_transform, warp_batch

logger = logging.getLogger(__name__)

SIDECAR_SCHEMA = 1
WILSON_Z = 1.959963984540054

# (image_id, image, label) -> 显著性图
SaliencyProvider = Callable[[int, np.ndarray, int], np.ndarray]


@dataclass
class AttackConfig:
    """补丁优化配置"""
    iterations: int = 300
    learning_rate: float = 5.0
    batch_images: int = 16
    transforms_per_image: int = 4
    patch_size: int = 16
    init_low: float = 0.4
    init_high: float = 0.6
    seed: int = 0
    support: TransformSupport = field(default_factory=TransformSupport)
    smoothing_window: int = 25
    dtype: str = "float32"

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError(f"iterations 不能为负: {self.iterations}")
        for name in ("batch_images", "transforms_per_image", "patch_size", "smoothing_window"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} 必须为正: {getattr(self, name)}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate 不能为负: {self.learning_rate}")
        if not 0.0 <= self.init_low <= self.init_high <= 1.0:
            raise ConfigError(f"初始化范围必须在 [0,1] 内: [{self.init_low}, {self.init_high}]")

    @classmethod
    def from_config(cls, section: Mapping[str, Any], **overrides) -> "AttackConfig":
        """由配置文件 attack 段构造"""
        support = TransformSupport(
            theta_max=float(section.get("theta_max", 0.0)),
            scale_low=float(section.get("scale_low", 0.4)),
            scale_high=float(section.get("scale_high", 0.5)),
            location=section.get("location", "random"),
        )
        params = {
            key: section[key]
            for key in ("iterations", "learning_rate", "batch_images", "transforms_per_image",
                        "patch_size", "init_low", "init_high", "seed")
            if key in section
        }
        params["support"] = support
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
            "seed": self.seed,
            "support": self.support.to_dict(),
            "smoothing_window": self.smoothing_window,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AttackConfig":
        data = dict(data)
        data["support"] = TransformSupport.from_dict(data.get("support", {}))
        return cls(**data)


@dataclass
class Patch:
    """优化得到的补丁及其来历"""
    pixels: np.ndarray
    target: int
    support: TransformSupport
    config: Dict[str, Any] = field(default_factory=dict)
    loss_curve: List[float] = field(default_factory=list)
    seed: int = 0
    metadata: Dict[str, Any] = field(default_factory=dict)

    def sidecar(self) -> Dict[str, Any]:
        return {
            "schema_version": SIDECAR_SCHEMA,
            "toolkit_version": __version__,
            "target": self.target,
            "support": self.support.to_dict(),
            "config": self.config,
            "loss_curve": [float(v) for v in self.loss_curve],
            "seed": self.seed,
            "metadata": self.metadata,
        }


@dataclass
class EvaluationResult:
    """攻击评估结果"""
    success_rate: float
    trials: int
    successes: int
    ci_low: float
    ci_high: float
    trial_log: List[Dict[str, Any]]
    per_image: Dict[int, float]

    @property
    def image_ids(self) -> List[int]:
        return sorted(self.per_image)

    def summary(self) -> Dict[str, Any]:
        return {
            "success_rate": self.success_rate,
            "trials": self.trials,
            "successes": self.successes,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
        }


def wilson_interval(successes: int, trials: int, z: float = WILSON_Z) -> Tuple[float, float]:
    """
    二项比例的 Wilson 置信区间

    Args:
        successes: 成功次数
        trials: 试验次数
        z: 正态分位数，默认对应 95%

    Returns:
        (下界, 上界)
    """
    if trials <= 0:
        raise ShapeError(f"试验次数必须为正: {trials}")
    p = successes / trials
    denom = 1.0 + z * z / trials
    center = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def init_patch(rng: np.random.Generator, size: int, low: float = 0.4, high: float = 0.6,
               channels: int = 3, dtype: Union[str, np.dtype] = np.float32) -> np.ndarray:
    """均匀随机初始化补丁像素"""
    return rng.uniform(low, high, size=(channels, size, size)).astype(dtype)


def compose_attacked_batch(
    images: np.ndarray,
    patch: Union[Tensor, np.ndarray],
    specs: Sequence[TransformSpec],
    mask: Union[Tensor, np.ndarray, None] = None
) -> Tensor:
    """
    按逐张变换把补丁贴到图像上

    不带遮罩时覆盖区域整体替换；带遮罩时按变换后的遮罩做逐像素凸组合。

    Args:
        images: 形状 (B, C, H, W)，第 k 张使用 specs[k]
        patch: 形状 (C, P, P)
        specs: 长度 B 的变换列表
        mask: 形状 (1, P, P) 的遮罩，可选

    Returns:
        攻击后图像 (B, C, H, W)
    """
    images = np.asarray(images)
    if images.ndim != 4 or len(specs) != len(images):
        raise ShapeError(f"图像批 {images.shape} 与变换数 {len(specs)} 不一致")
    canvas, footprint = warp_batch(patch, specs, images.shape)
    if canvas.shape[1] != images.shape[1]:
        raise ShapeError(f"补丁通道数 {canvas.shape[1]} 与图像通道数 {images.shape[1]} 不一致")
    if mask is None:
        alpha = footprint[:, None].astype(images.dtype)
    else:
        alpha, _ = warp_batch(mask, specs, images.shape)
        if alpha.shape[1] != 1 or alpha.shape[2:] != canvas.shape[2:]:
            raise ShapeError(f"遮罩变换结果 {alpha.shape} 与补丁 {canvas.shape} 不匹配")
    return clamp(lerp(Tensor(images), canvas, alpha))


def sample_specs(
    support: TransformSupport,
    images: np.ndarray,
    image_ids: Sequence[int],
    labels: Sequence[int],
    patch_shape: Sequence[int],
    rng: np.random.Generator,
    per_image: int,
    saliency_provider: Optional[SaliencyProvider] = None
) -> List[TransformSpec]:
    """为每张图像依次采样 per_image 个变换，并校验都落在支撑集内"""
    needs_saliency = support.location.value.startswith("saliency")
    if needs_saliency and saliency_provider is None:
        raise ConfigError(f"{support.location.value} 策略需要显著性图")
    specs = []
    for image, image_id, label in zip(images, image_ids, labels):
        saliency = saliency_provider(int(image_id), image, int(label)) if needs_saliency else None
        for _ in range(per_image):
            spec = sample_transform(support, image.shape, patch_shape, rng, saliency)
            if not support.contains(spec):
                raise PatchForgeError(f"采样的变换 {spec} 超出支撑集 {support.describe()}")
            specs.append(spec)
    return specs


def eot_step(
    patch: np.ndarray,
    model: Model,
    images: np.ndarray,
    target: int,
    support: TransformSupport,
    rng: np.random.Generator,
    learning_rate: float,
    transforms_per_image: int = 4,
    image_ids: Optional[Sequence[int]] = None,
    labels: Optional[Sequence[int]] = None,
    saliency_provider: Optional[SaliencyProvider] = None,
    iteration: int = 0
) -> Tuple[float, np.ndarray]:
    """
    一步投影梯度下降

    Args:
        patch: 当前补丁 (C, P, P)
        model: 冻结的模型
        images: 本步图像 (n, C, H, W)
        target: 目标类别
        support: 训练支撑集
        rng: 随机数生成器
        learning_rate: 学习率
        transforms_per_image: 每张图像采样的变换数
        image_ids / labels: 显著性放置所需的图像编号与真实标签
        saliency_provider: 显著性图来源
        iteration: 当前迭代序号（用于诊断）

    Returns:
        (批均值交叉熵, 更新并截断到 [0,1] 的补丁)
    """
    image_ids = image_ids if image_ids is not None else range(len(images))
    labels = labels if labels is not None else [0] * len(images)
    specs = sample_specs(support, images, image_ids, labels, patch.shape, rng, transforms_per_image, saliency_provider)
    batch = np.repeat(images, transforms_per_image, axis=0)

    patch_t = Tensor(patch, requires_grad=True)
    attacked = compose_attacked_batch(batch, patch_t, specs)
    loss = softmax_cross_entropy(model.forward(attacked), target)
    loss_value = loss.item()
    if not np.isfinite(loss_value):
        raise DivergenceError(
            f"补丁优化发散: 第 {iteration} 次迭代损失为 {loss_value} (lr={learning_rate})",
            iteration=iteration,
            learning_rate=learning_rate,
        )
    backward(loss)
    grad = np.zeros_like(patch) if patch_t.grad is None else patch_t.grad
    updated = np.clip(patch - learning_rate * grad, 0.0, 1.0).astype(patch.dtype)
    return loss_value, updated


def smoothed_improved(curve: Sequence[float], window: int = 25) -> bool:
    """平滑后的末段损失是否不高于起始段"""
    if len(curve) == 0:
        return True
    window = max(1, min(window, len(curve)))
    return float(np.mean(curve[-window:])) <= float(np.mean(curve[:window]))


def draw_pool_batch(pool: Dataset, size: int, rng: np.random.Generator) -> np.ndarray:
    """从图像池抽取一批下标（池不足时有放回）"""
    return rng.choice(len(pool), size=size, replace=len(pool) < size)


def attack_pool(dataset: Dataset, target: int) -> Dataset:
    """去掉真实标签为目标类别的图像"""
    if not 0 <= target < dataset.num_classes:
        raise ConfigError(f"目标类别 {target} 超出类别数 {dataset.num_classes}")
    pool = dataset.excluding_label(target)
    if len(pool) == 0:
        raise EmptyPoolError(f"排除目标类别 {target} 后图像池为空")
    return pool


def optimize_patch(
    model: Model,
    target: int,
    pool: Dataset,
    config: AttackConfig,
    saliency_provider: Optional[SaliencyProvider] = None,
    progress: bool = True
) -> Patch:
    """
    在训练支撑集上运行 EoT 补丁优化

    Args:
        model: 被攻击的模型
        target: 目标类别
        pool: 优化用图像池（目标类别图像会被排除）
        config: 优化配置
        saliency_provider: 显著性放置策略所需
        progress: 是否显示进度条

    Returns:
        补丁（含完整损失曲线）
    """
    pool = attack_pool(pool, target)
    checksum = model.checksum()
    rng = np.random.default_rng(config.seed)
    images = pool.images.astype(config.dtype, copy=False)
    pixels = init_patch(rng, config.patch_size, config.init_low, config.init_high, images.shape[1], config.dtype)
    curve: List[float] = []

    bar = tqdm(range(config.iterations), desc=f"patch→{target}", leave=False,
               disable=not progress or not sys.stderr.isatty())
    for iteration in bar:
        idx = draw_pool_batch(pool, config.batch_images, rng)
        loss, pixels = eot_step(
            pixels, model, images[idx], target, config.support, rng, config.learning_rate,
            config.transforms_per_image, pool.ids[idx], pool.labels[idx], saliency_provider, iteration
        )
        curve.append(loss)
        bar.set_postfix(loss=f"{loss:.4f}")

    if model.checksum() != checksum:
        raise PatchForgeError("补丁优化期间模型参数发生了变化")

    improved = smoothed_improved(curve, config.smoothing_window)
    if not improved:
        logger.warning(f"目标 {target}: 平滑后损失未下降")
    logger.info(f"目标 {target} 补丁优化完成: {config.iterations} 次迭代, "
                f"末次损失 {curve[-1] if curve else float('nan'):.4f}")
    return Patch(
        pixels=pixels,
        target=int(target),
        support=config.support,
        config=config.to_dict(),
        loss_curve=curve,
        seed=config.seed,
        metadata={"loss_decreased": improved, "model_checksum": checksum},
    )


def _evaluate_image(
    model: Model,
    patch: np.ndarray,
    mask: Optional[np.ndarray],
    image: np.ndarray,
    image_id: int,
    label: int,
    target: int,
    support: TransformSupport,
    n_samples: int,
    seed_seq: np.random.SeedSequence,
    saliency_provider: Optional[SaliencyProvider]
) -> List[Dict[str, Any]]:
    rng = np.random.default_rng(seed_seq)
    specs = sample_specs(support, image[None], [image_id], [label], patch.shape, rng, n_samples, saliency_provider)
    batch = np.repeat(image[None], n_samples, axis=0)
    with no_grad():
        attacked = compose_attacked_batch(batch, patch, specs, mask)
        predicted = np.argmax(model.forward(attacked).values, axis=1)
    return [
        {
            "image_id": int(image_id),
            "theta": spec.theta,
            "scale": spec.scale,
            "row": spec.row,
            "col": spec.col,
            "predicted": int(pred),
            "success": bool(pred == target),
        }
        for spec, pred in zip(specs, predicted)
    ]


def evaluate_attack(
    patch: np.ndarray,
    model: Model,
    test: Dataset,
    target: int,
    support: TransformSupport,
    n_samples: int,
    seed: Union[int, np.random.Generator] = 0,
    mask: Optional[np.ndarray] = None,
    workers: int = 1,
    saliency_provider: Optional[SaliencyProvider] = None
) -> EvaluationResult:
    """
    在测试支撑集上统计目标攻击成功率

    每张图像使用由主种子派生的独立随机流，结果与线程数无关。

    Args:
        patch: 补丁像素 (C, P, P)
        model: 模型
        test: 测试图像（目标类别图像会被排除）
        target: 目标类别
        support: 测试支撑集
        n_samples: 每张图像采样的变换数
        seed: 主种子或随机数生成器
        mask: 遮罩 (1, P, P)，缺省为不透明
        workers: 并行线程数
        saliency_provider: 显著性放置策略所需

    Returns:
        评估结果（含逐次试验日志与逐图像成功率）
    """
    if n_samples <= 0:
        raise ConfigError(f"每张图像的变换采样数必须为正: {n_samples}")
    pool = attack_pool(test, target)
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(0, 2 ** 63))
    children = np.random.SeedSequence(seed).spawn(len(pool))
    images = pool.images.astype(patch.dtype, copy=False)

    def run(index: int) -> List[Dict[str, Any]]:
        return _evaluate_image(model, patch, mask, images[index], int(pool.ids[index]), int(pool.labels[index]),
                               target, support, n_samples, children[index], saliency_provider)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            per_image_logs = list(executor.map(run, range(len(pool))))
    else:
        per_image_logs = [run(index) for index in range(len(pool))]

    trial_log = [entry for log in per_image_logs for entry in log]
    successes = sum(entry["success"] for entry in trial_log)
    trials = len(trial_log)
    low, high = wilson_interval(successes, trials)
    per_image = {log[0]["image_id"]: float(np.mean([e["success"] for e in log])) for log in per_image_logs}
    return EvaluationResult(
        success_rate=successes / trials,
        trials=trials,
        successes=int(successes),
        ci_low=low,
        ci_high=high,
        trial_log=trial_log,
        per_image=per_image,
    )


def save_patch_bundle(patch: Patch, directory: Union[str, Path], stem: str = "patch") -> Dict[str, str]:
    """
    保存补丁产物：PNG（查看用）、.npy（精确数值）与 JSON 旁注

    Returns:
        各文件路径
    """
    directory = Path(directory)
    paths = {
        "png": file_processor.save_image_png(patch.pixels, directory / f"{stem}.png"),
        "npy": file_processor.save_array(patch.pixels, directory / f"{stem}.npy"),
        "json": file_processor.write_json(patch.sidecar(), directory / f"{stem}.json"),
    }
    return {key: str(value) for key, value in paths.items()}


def load_patch_bundle(directory: Union[str, Path], stem: str = "patch") -> Patch:
    """读取 save_patch_bundle 写出的补丁"""
    directory = Path(directory)
    sidecar = file_processor.read_json(directory / f"{stem}.json")
    if sidecar.get("schema_version") != SIDECAR_SCHEMA:
        raise PatchForgeError(f"补丁旁注版本不受支持: {sidecar.get('schema_version')}")
    return Patch(
        pixels=file_processor.load_array(directory / f"{stem}.npy"),
        target=int(sidecar["target"]),
        support=TransformSupport.from_dict(sidecar["support"]),
        config=sidecar.get("config", {}),
        loss_curve=list(sidecar.get("loss_curve", [])),
        seed=int(sidecar.get("seed", 0)),
        metadata=sidecar.get("metadata", {}),
    )
