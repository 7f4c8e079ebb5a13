"""
结果报告
实验记录导出为 CSV（每条记录一行）与 JSON（完整来历），可选 SVG 图表
"""
import io
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Sequence, Union

import pandas as pd

from .. import __version__
from ..batch.core import ExperimentRecord
from ..utils.errors import ConfigError, PatchForgeError
from ..utils.file_handler import file_processor

logger = logging.getLogger(__name__)

REPORT_SCHEMA = 1
FLOAT_FORMAT = "%.17g"

BASE_COLUMNS = [
    "cell_id", "kind", "variant", "target", "test_condition", "bin_low", "bin_high",
    "success_rate", "trials", "successes", "ci_low", "ci_high", "seed", "wall_time",
]
SUPPORT_COLUMNS = ["theta_max", "theta_offset", "scale_low", "scale_high", "location"]


def _require_records(records: Sequence[ExperimentRecord]) -> None:
    if not records:
        raise ConfigError("没有可导出的实验记录")


def records_frame(records: Sequence[ExperimentRecord]) -> pd.DataFrame:
    """
    把记录展平为表格

    训练支撑集拆成 train_* 列；extra 中的标量字段以 extra_ 前缀成列，列序固定。
    """
    _require_records(records)
    extra_keys = sorted({
        key for record in records for key, value in record.extra.items()
        if isinstance(value, (int, float, bool, str))
    })
    rows = []
    for record in records:
        data = record.to_dict()
        row = {column: data[column] for column in BASE_COLUMNS}
        for column in SUPPORT_COLUMNS:
            row[f"train_{column}"] = record.train_support.get(column)
        for key in extra_keys:
            value = record.extra.get(key)
            row[f"extra_{key}"] = value if isinstance(value, (int, float, bool, str)) else None
        rows.append(row)
    columns = BASE_COLUMNS + [f"train_{c}" for c in SUPPORT_COLUMNS] + [f"extra_{k}" for k in extra_keys]
    return pd.DataFrame(rows, columns=columns)


def write_csv(records: Sequence[ExperimentRecord], file_path: Union[str, Path]) -> Path:
    """浮点数按 17 位有效数字写出，重新读入时数值不变"""
    frame = records_frame(records)
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    path = file_processor.atomic_write_bytes(file_path, buffer.getvalue().encode("utf-8"))
    logger.info(f"CSV 报告已写出: {path} ({len(frame)} 行)")
    return path


def read_csv(file_path: Union[str, Path]) -> pd.DataFrame:
    """读取 write_csv 写出的报告"""
    return pd.read_csv(file_path, float_precision="round_trip")


def write_json(records: Sequence[ExperimentRecord], file_path: Union[str, Path]) -> Path:
    """完整记录（含训练支撑集、产物路径与附加字段）"""
    _require_records(records)
    payload = {
        "schema_version": REPORT_SCHEMA,
        "toolkit_version": __version__,
        "records": [record.to_dict() for record in records],
    }
    path = file_processor.write_json(payload, file_path)
    logger.info(f"JSON 报告已写出: {path}")
    return path


def load_records(file_path: Union[str, Path]) -> List[ExperimentRecord]:
    """
    读取记录：支持 JSON 报告、单元 records.json 以及实验目录（递归收集各单元的 records.json）

    Args:
        file_path: 文件或目录

    Returns:
        记录列表
    """
    path = Path(file_path)
    if path.is_dir():
        records: List[ExperimentRecord] = []
        for records_file in sorted(path.rglob("records.json")):
            records.extend(load_records(records_file))
        return records
    try:
        data = file_processor.read_json(path)
    except (OSError, json.JSONDecodeError) as e:
        raise PatchForgeError(f"无法读取记录文件 {path}: {e}") from e
    entries = data["records"] if isinstance(data, dict) else data
    return [ExperimentRecord.from_dict(entry) for entry in entries]


def emit_report(
    records: Sequence[ExperimentRecord],
    out_dir: Union[str, Path],
    formats: Sequence[str] = ("csv", "json", "svg"),
    stem: str = "report"
) -> Dict[str, Any]:
    """
    导出报告

    Args:
        records: 实验记录（不能为空）
        out_dir: 输出目录
        formats: csv / json / svg 的任意组合
        stem: 文件名前缀

    Returns:
        {格式: 路径}，svg 对应 {实验类型: 路径}
    """
    _require_records(records)
    unknown = set(formats) - {"csv", "json", "svg"}
    if unknown:
        raise ConfigError(f"不支持的报告格式: {sorted(unknown)}")

    out_dir = Path(out_dir)
    paths: Dict[str, Any] = {}
    try:
        if "csv" in formats:
            paths["csv"] = str(write_csv(records, out_dir / f"{stem}.csv"))
        if "json" in formats:
            paths["json"] = str(write_json(records, out_dir / f"{stem}.json"))
        if "svg" in formats:
            from .charts import plot_records
            paths["svg"] = {kind: str(p) for kind, p in plot_records(records, out_dir, stem).items()}
    except OSError as e:
        raise PatchForgeError(f"报告目录不可写: {out_dir} ({e})") from e
    return paths
