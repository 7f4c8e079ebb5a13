"""
分类器训练
带动量与权重衰减的小批量 SGD，给定种子时结果完全确定
"""
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from ..diffcore import backward, softmax_cross_entropy
from ..utils.errors import ConfigError, DivergenceError, EmptyPoolError
from .dataset import Dataset
from .network import DEFAULT_ARCHITECTURE, LayerSpec, Model, build_model, predict_labels
from .storage import save_model

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """训练配置"""
    epochs: int = 8
    learning_rate: float = 0.02
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    dtype: str = "float32"
    architecture: Sequence[LayerSpec] = field(default=DEFAULT_ARCHITECTURE)

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"training.epochs 不能为负: {self.epochs}")
        if self.learning_rate <= 0 or self.batch_size <= 0:
            raise ConfigError(f"training.learning_rate 与 batch_size 必须为正: {self.learning_rate}, {self.batch_size}")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError(f"training.momentum 须在 [0,1)，weight_decay 不能为负")

    @classmethod
    def from_config(cls, section: Dict[str, Any], **overrides) -> "TrainConfig":
        """由配置文件 training 段构造"""
        known = {k: section[k] for k in ("epochs", "learning_rate", "batch_size", "momentum", "weight_decay", "seed") if k in section}
        known.update(overrides)
        return cls(**known)

    def summary(self) -> Dict[str, Any]:
        data = asdict(self)
        data["architecture"] = [layer.to_dict() for layer in self.architecture]
        return data


def accuracy(model: Model, dataset: Dataset, batch_size: int = 256) -> float:
    """top-1 准确率"""
    if len(dataset) == 0:
        return float("nan")
    return float(np.mean(predict_labels(model, dataset.images, batch_size) == dataset.labels))


def train_classifier(
    train: Dataset,
    config: TrainConfig,
    test: Optional[Dataset] = None,
    checkpoint_dir: Union[str, Path, None] = None,
    progress: bool = True
) -> Model:
    """
    训练分类器

    Args:
        train: 训练集
        config: 训练配置
        test: 留出测试集，用于记录准确率
        checkpoint_dir: 每个 epoch 结束时保存检查点的目录
        progress: 是否显示进度条

    Returns:
        参数只读的训练后模型

    Raises:
        EmptyPoolError: 训练集为空
        DivergenceError: 损失出现 NaN，附带最近一次检查点
    """
    if len(train) == 0:
        raise EmptyPoolError("训练集为空")

    dtype = np.dtype(config.dtype)
    model = build_model(config.architecture, train.image_shape, train.num_classes, config.seed, dtype)
    rng = np.random.default_rng(config.seed)
    velocity = {name: np.zeros_like(value) for name, value in model.params.items()}
    images = train.images.astype(dtype, copy=False)
    last_checkpoint: Optional[str] = None
    history = []

    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        batches = range(0, len(order), config.batch_size)
        running = 0.0
        bar = tqdm(batches, desc=f"epoch {epoch + 1}/{config.epochs}", leave=False,
                   disable=not progress or not sys.stderr.isatty())
        for step, start in enumerate(bar):
            idx = order[start:start + config.batch_size]
            params = model.parameter_tensors(requires_grad=True)
            loss = softmax_cross_entropy(model.forward(images[idx], params), train.labels[idx])
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise DivergenceError(
                    f"训练发散: epoch {epoch + 1} 第 {step} 批损失为 {loss_value}，最近检查点 {last_checkpoint}",
                    iteration=epoch * len(batches) + step,
                    learning_rate=config.learning_rate,
                    checkpoint=last_checkpoint,
                )
            backward(loss)
            for name, tensor in params.items():
                grad = tensor.grad + config.weight_decay * model.params[name]
                velocity[name] = config.momentum * velocity[name] + grad
                model.params[name] = (model.params[name] - config.learning_rate * velocity[name]).astype(dtype)
            running += loss_value
            bar.set_postfix(loss=f"{running / (step + 1):.4f}")

        epoch_loss = running / max(1, len(batches))
        entry = {"epoch": epoch + 1, "loss": epoch_loss}
        if test is not None:
            entry["test_accuracy"] = accuracy(model, test)
        history.append(entry)
        logger.info(f"epoch {epoch + 1}/{config.epochs}: loss={epoch_loss:.4f}"
                    + (f", test_acc={entry['test_accuracy']:.4f}" if test is not None else ""))

        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"epoch_{epoch + 1:03d}.pfm"
            save_model(model, path)
            last_checkpoint = str(path)

    model.metadata.update({
        "training": config.summary(),
        "history": history,
        "train_accuracy": accuracy(model, train),
        "test_accuracy": accuracy(model, test) if test is not None else None,
        "train_size": len(train),
        "test_size": len(test) if test is not None else 0,
    })
    logger.info(f"训练完成: train_acc={model.metadata['train_accuracy']:.4f}, "
                f"test_acc={model.metadata['test_accuracy']}")
    return model.freeze()
