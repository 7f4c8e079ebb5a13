"""
实验批处理核心模块
负责实验单元的定义、结果记录、队列管理和进度追踪
"""
import hashlib
import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

from ..attack.geometry import TransformSupport
from ..utils.errors import ConfigError, ShapeError
from ..utils.file_handler import file_processor

logger = logging.getLogger(__name__)


class ExperimentKind(Enum):
    """实验类型"""
    BASE = "base"
    SCALE_UP = "scale_up"
    SCALE_DOWN = "scale_down"
    ROTATION = "rotation"
    LOCATION = "location"
    TRANSPARENCY = "transparency"
    JOINT = "joint"


# 要求训练支撑 ⊆ 测试支撑的实验
CONSTRAINED_KINDS = (
    ExperimentKind.SCALE_UP, ExperimentKind.SCALE_DOWN, ExperimentKind.ROTATION, ExperimentKind.JOINT
)


class CellStatus(Enum):
    """实验单元状态"""
    PENDING = "pending"      # 等待中
    RUNNING = "running"      # 执行中
    COMPLETED = "completed"  # 已完成
    FAILED = "failed"        # 失败


def cell_seed(master_seed: int, cell_id: str) -> int:
    """由主种子与单元编号派生单元种子（与调度顺序无关）"""
    digest = hashlib.sha256(f"{master_seed}:{cell_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass
class ExperimentRecord:
    """一条实验结果：某个单元在某个测试条件下的成功率"""
    cell_id: str
    kind: str
    variant: str
    target: int
    train_support: Dict[str, Any]
    test_condition: str
    bin_low: Optional[float]
    bin_high: Optional[float]
    success_rate: float
    trials: int
    successes: int
    ci_low: float
    ci_high: float
    artifact_paths: Dict[str, str] = field(default_factory=dict)
    wall_time: float = 0.0
    seed: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.trials <= 0:
            raise ShapeError(f"{self.cell_id}: 试验次数必须为正")
        if not 0.0 <= self.success_rate <= 1.0:
            raise ShapeError(f"{self.cell_id}: 成功率超出 [0,1]: {self.success_rate}")

    def to_dict(self, include_wall_time: bool = True) -> Dict[str, Any]:
        """转换为字典"""
        data = {
            "cell_id": self.cell_id,
            "kind": self.kind,
            "variant": self.variant,
            "target": self.target,
            "train_support": self.train_support,
            "test_condition": self.test_condition,
            "bin_low": self.bin_low,
            "bin_high": self.bin_high,
            "success_rate": self.success_rate,
            "trials": self.trials,
            "successes": self.successes,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "artifact_paths": self.artifact_paths,
            "seed": self.seed,
            "extra": self.extra,
        }
        if include_wall_time:
            data["wall_time"] = self.wall_time
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentRecord":
        """从字典创建记录"""
        return cls(
            cell_id=data["cell_id"],
            kind=data["kind"],
            variant=data.get("variant", ""),
            target=int(data["target"]),
            train_support=data.get("train_support", {}),
            test_condition=data.get("test_condition", ""),
            bin_low=data.get("bin_low"),
            bin_high=data.get("bin_high"),
            success_rate=float(data["success_rate"]),
            trials=int(data["trials"]),
            successes=int(data["successes"]),
            ci_low=float(data["ci_low"]),
            ci_high=float(data["ci_high"]),
            artifact_paths=data.get("artifact_paths", {}),
            wall_time=float(data.get("wall_time", 0.0)),
            seed=int(data.get("seed", 0)),
            extra=data.get("extra", {}),
        )


@dataclass
class Cell:
    """实验单元：一个训练支撑集 × 一个目标类别"""
    cell_id: str
    kind: ExperimentKind
    variant: str
    target: int
    train_support: TransformSupport
    test_support: TransformSupport
    seed: int
    parameters: Dict[str, Any] = field(default_factory=dict)
    status: CellStatus = CellStatus.PENDING
    error_message: str = ""
    records: List[ExperimentRecord] = field(default_factory=list)
    artifact_paths: Dict[str, str] = field(default_factory=dict)
    wall_time: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典（不含结果记录）"""
        return {
            "cell_id": self.cell_id,
            "kind": self.kind.value,
            "variant": self.variant,
            "target": self.target,
            "train_support": self.train_support.to_dict(),
            "test_support": self.test_support.to_dict(),
            "seed": self.seed,
            "parameters": self.parameters,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Cell":
        """从字典创建单元"""
        return cls(
            cell_id=data["cell_id"],
            kind=ExperimentKind(data["kind"]),
            variant=data.get("variant", ""),
            target=int(data["target"]),
            train_support=TransformSupport.from_dict(data["train_support"]),
            test_support=TransformSupport.from_dict(data["test_support"]),
            seed=int(data["seed"]),
            parameters=data.get("parameters", {}),
        )

    def status_dict(self) -> Dict[str, Any]:
        data = self.to_dict()
        data.update({
            "status": self.status.value,
            "error_message": self.error_message,
            "record_count": len(self.records),
            "artifact_paths": self.artifact_paths,
            "wall_time": self.wall_time,
        })
        return data


@dataclass
class ExperimentPlan:
    """实验计划：同一类实验的全部单元"""
    kind: ExperimentKind
    cells: List[Cell]
    test_support: TransformSupport
    targets: List[int]
    master_seed: int
    model_checksum: str = ""
    settings: Dict[str, Any] = field(default_factory=dict)

    def validate(self) -> List[str]:
        """
        校验计划

        约束 EoT 类实验的训练支撑集应包含于测试支撑集；越界的单元照常运行，
        记录警告并在 parameters 中标记 support_outside_test。

        Returns:
            越界单元的编号

        Raises:
            ConfigError: 单元编号重复
        """
        ids = [cell.cell_id for cell in self.cells]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"{self.kind.value}: 单元编号重复")
        if self.kind not in CONSTRAINED_KINDS:
            return []
        outside = []
        for cell in self.cells:
            if not cell.train_support.is_subset_of(self.test_support):
                logger.warning(
                    f"{cell.cell_id}: 训练支撑 {cell.train_support.describe()} "
                    f"不在测试支撑 {self.test_support.describe()} 内"
                )
                cell.parameters["support_outside_test"] = True
                outside.append(cell.cell_id)
        return outside

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "test_support": self.test_support.to_dict(),
            "targets": self.targets,
            "master_seed": self.master_seed,
            "model_checksum": self.model_checksum,
            "settings": self.settings,
            "cells": [cell.cell_id for cell in self.cells],
        }


class CellQueue:
    """实验单元队列"""

    def __init__(self):
        """初始化队列"""
        self.cells: Dict[str, Cell] = {}
        self.order: List[str] = []
        self._lock = threading.Lock()
        self.logger = logging.getLogger(__name__)

    def add_cell(self, cell: Cell) -> None:
        """添加单元"""
        with self._lock:
            if cell.cell_id in self.cells:
                raise ConfigError(f"单元已存在: {cell.cell_id}")
            self.cells[cell.cell_id] = cell
            self.order.append(cell.cell_id)
        self.logger.debug(f"添加单元: {cell.cell_id}")

    def add_cells(self, cells: Sequence[Cell]) -> None:
        """批量添加单元"""
        for cell in cells:
            self.add_cell(cell)
        self.logger.info(f"批量添加 {len(cells)} 个单元")

    def next_cell(self) -> Optional[Cell]:
        """取出下一个待执行单元并标记为执行中"""
        with self._lock:
            for cell_id in self.order:
                cell = self.cells[cell_id]
                if cell.status == CellStatus.PENDING:
                    cell.status = CellStatus.RUNNING
                    return cell
        return None

    def update_status(self, cell_id: str, status: CellStatus, **kwargs) -> None:
        """更新单元状态"""
        with self._lock:
            cell = self.cells.get(cell_id)
            if cell is None:
                return
            cell.status = status
            for key, value in kwargs.items():
                if hasattr(cell, key):
                    setattr(cell, key, value)

    def get_cells_by_status(self, status: CellStatus) -> List[Cell]:
        """按状态获取单元（保持添加顺序）"""
        return [self.cells[cid] for cid in self.order if self.cells[cid].status == status]

    def get_queue_status(self) -> Dict[str, int]:
        """获取队列状态"""
        with self._lock:
            counts = {status.value: 0 for status in CellStatus}
            for cell in self.cells.values():
                counts[cell.status.value] += 1
            counts["total"] = len(self.cells)
            return counts

    def records(self) -> List[ExperimentRecord]:
        """已完成单元的全部记录（按添加顺序）"""
        return [record for cid in self.order for record in self.cells[cid].records]

    def save_manifest(self, file_path: Union[str, Path], plan: Optional[ExperimentPlan] = None) -> Path:
        """保存单元状态清单"""
        with self._lock:
            manifest = {
                "plan": plan.to_dict() if plan is not None else None,
                "cells": [self.cells[cid].status_dict() for cid in self.order],
                "status": {status.value: sum(c.status == status for c in self.cells.values()) for status in CellStatus},
            }
        path = file_processor.write_json(manifest, file_path)
        self.logger.info(f"单元清单已保存到: {path}")
        return path

    def load_manifest(self, file_path: Union[str, Path]) -> None:
        """从清单恢复单元；未完成的单元重新置为等待"""
        manifest = file_processor.read_json(file_path)
        with self._lock:
            self.cells.clear()
            self.order.clear()
            for entry in manifest.get("cells", []):
                cell = Cell.from_dict(entry)
                status = CellStatus(entry.get("status", "pending"))
                cell.status = CellStatus.COMPLETED if status == CellStatus.COMPLETED else CellStatus.PENDING
                cell.artifact_paths = entry.get("artifact_paths", {})
                cell.wall_time = float(entry.get("wall_time", 0.0))
                self.cells[cell.cell_id] = cell
                self.order.append(cell.cell_id)
        self.logger.info(f"单元清单已从文件加载: {file_path}")


class ProgressTracker:
    """进度追踪器"""

    def __init__(self):
        """初始化进度追踪器"""
        self.progress_callbacks: List[Callable[[Dict[str, Any]], None]] = []
        self.logger = logging.getLogger(__name__)

    def add_progress_callback(self, callback: Callable[[Dict[str, Any]], None]) -> None:
        """添加进度回调函数"""
        self.progress_callbacks.append(callback)

    def update_progress(self, progress_data: Dict[str, Any]) -> None:
        """通知所有回调"""
        for callback in self.progress_callbacks:
            try:
                callback(progress_data)
            except Exception as e:
                self.logger.error(f"进度回调函数执行失败: {e}")

    def calculate_progress(self, queue: CellQueue) -> Dict[str, Any]:
        """计算总体进度"""
        status = queue.get_queue_status()
        total = status["total"]
        if total == 0:
            return {"total_cells": 0, "completed_cells": 0, "failed_cells": 0, "running_cells": 0,
                    "pending_cells": 0, "progress_percentage": 0.0, "status": "idle"}

        completed, failed = status["completed"], status["failed"]
        running, pending = status["running"], status["pending"]
        if running > 0:
            overall = "running"
        elif pending > 0:
            overall = "pending"
        elif failed > 0 and completed == 0:
            overall = "failed"
        else:
            overall = "completed"

        return {
            "total_cells": total,
            "completed_cells": completed,
            "failed_cells": failed,
            "running_cells": running,
            "pending_cells": pending,
            "progress_percentage": (completed + failed) / total * 100,
            "status": overall,
        }
