"""
实验单元调度器
在有界线程池中执行实验单元，单个单元失败不会中断整个实验
"""
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

from .core import Cell, CellQueue, CellStatus, ExperimentPlan, ExperimentRecord, ProgressTracker

# 单元执行函数：返回 (记录列表, 产物路径)
CellRunner = Callable[[Cell], Tuple[List[ExperimentRecord], Dict[str, str]]]
# 续跑时读回已完成单元的记录
RecordLoader = Callable[[Cell], List[ExperimentRecord]]


class CellExecutor:
    """单元执行器"""

    def __init__(self, runner: CellRunner):
        """
        Args:
            runner: 执行一个单元并返回 (记录, 产物路径) 的函数
        """
        self.runner = runner
        self.logger = logging.getLogger(__name__)

    def execute_cell(self, cell: Cell) -> Dict[str, Any]:
        """
        执行单个单元，把异常转换为失败结果

        Args:
            cell: 实验单元

        Returns:
            执行结果
        """
        started = time.perf_counter()
        try:
            self.logger.info(f"开始执行单元: {cell.cell_id}")
            records, artifacts = self.runner(cell)
            wall_time = time.perf_counter() - started
            for record in records:
                record.wall_time = wall_time
            return {"success": True, "cell_id": cell.cell_id, "records": records,
                    "artifact_paths": artifacts, "wall_time": wall_time}
        except Exception as e:
            self.logger.error(f"单元执行失败: {cell.cell_id}, 错误: {type(e).__name__}: {e}")
            return {"success": False, "cell_id": cell.cell_id, "error": f"{type(e).__name__}: {e}",
                    "wall_time": time.perf_counter() - started}


class CellScheduler:
    """单元调度器"""

    def __init__(self, max_workers: int = 1, progress_tracker: Optional[ProgressTracker] = None):
        """
        Args:
            max_workers: 并发单元数上限
            progress_tracker: 进度追踪器
        """
        self.max_workers = max(1, int(max_workers))
        self.progress_tracker = progress_tracker or ProgressTracker()
        self.status_callbacks: List[Callable[[str, Dict[str, Any]], None]] = []
        self.logger = logging.getLogger(__name__)

    def add_status_callback(self, callback: Callable[[str, Dict[str, Any]], None]) -> None:
        """添加状态回调函数"""
        self.status_callbacks.append(callback)

    def _notify_status(self, event: str, data: Dict[str, Any]) -> None:
        for callback in self.status_callbacks:
            try:
                callback(event, data)
            except Exception as e:
                self.logger.error(f"状态回调执行失败: {e}")

    def run(
        self,
        cells: Sequence[Cell],
        runner: CellRunner,
        manifest_path: Union[str, Path, None] = None,
        plan: Optional[ExperimentPlan] = None,
        resume: bool = False,
        load_records: Optional[RecordLoader] = None
    ) -> CellQueue:
        """
        执行全部单元

        单元结果与调度顺序无关；无论成败，结束时都会保存单元清单。

        Args:
            cells: 实验单元
            runner: 单元执行函数
            manifest_path: 单元清单保存路径
            plan: 实验计划（写入清单）
            resume: 从已有清单续跑，配置未变且已完成的单元不再执行
            load_records: 读回已完成单元记录的函数

        Returns:
            执行完毕的队列
        """
        if resume and manifest_path is not None and Path(manifest_path).exists():
            self._restore_completed(cells, manifest_path, load_records)
        queue = CellQueue()
        queue.add_cells(cells)
        executor = CellExecutor(runner)

        try:
            with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
                futures = {}
                while True:
                    cell = queue.next_cell()
                    if cell is None:
                        break
                    futures[pool.submit(executor.execute_cell, cell)] = cell
                    self._notify_status("cell_started", {"cell_id": cell.cell_id})

                for future in as_completed(futures):
                    cell = futures[future]
                    self._handle_result(queue, cell, future.result())
                    self.progress_tracker.update_progress(self.progress_tracker.calculate_progress(queue))
        finally:
            if manifest_path is not None:
                queue.save_manifest(manifest_path, plan)

        status = queue.get_queue_status()
        self.logger.info(f"实验完成: {status['completed']} 个单元成功, {status['failed']} 个失败")
        return queue

    def _restore_completed(self, cells: Sequence[Cell], manifest_path: Union[str, Path],
                           load_records: Optional[RecordLoader]) -> None:
        """把清单中已完成且定义未变的单元标记为完成"""
        previous = CellQueue()
        previous.load_manifest(manifest_path)
        restored = 0
        for cell in cells:
            old = previous.cells.get(cell.cell_id)
            if old is None or old.status != CellStatus.COMPLETED:
                continue
            if json.dumps(old.to_dict(), sort_keys=True) != json.dumps(cell.to_dict(), sort_keys=True):
                self.logger.info(f"{cell.cell_id}: 单元定义已变化，重新执行")
                continue
            try:
                records = load_records(cell) if load_records is not None else []
            except (OSError, ValueError, KeyError) as e:
                self.logger.warning(f"{cell.cell_id}: 无法读回已有记录，重新执行 ({e})")
                continue
            cell.status = CellStatus.COMPLETED
            cell.records = records
            cell.artifact_paths = old.artifact_paths
            for record in records:
                record.wall_time = old.wall_time
            cell.wall_time = old.wall_time
            restored += 1
        self.logger.info(f"续跑: {restored} 个单元沿用已有结果")

    def _handle_result(self, queue: CellQueue, cell: Cell, result: Dict[str, Any]) -> None:
        if result.get("success"):
            queue.update_status(cell.cell_id, CellStatus.COMPLETED, records=result["records"],
                                artifact_paths=result["artifact_paths"], wall_time=result["wall_time"])
            self._notify_status("cell_completed", {"cell_id": cell.cell_id, "result": result})
        else:
            queue.update_status(cell.cell_id, CellStatus.FAILED, error_message=result.get("error", "未知错误"),
                                wall_time=result["wall_time"])
            self._notify_status("cell_failed", {"cell_id": cell.cell_id, "error": result.get("error")})
