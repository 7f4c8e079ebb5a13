"""
SVG 图表
同样的记录总是得到逐字节相同的 SVG
"""
import io
import logging
import re
import threading
from pathlib import Path
from typing import Dict, List, Sequence, Union

import matplotlib
matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from ..batch.core import ExperimentKind, ExperimentRecord
from ..utils.errors import ConfigError
from ..utils.file_handler import file_processor

logger = logging.getLogger(__name__)

SVG_HASHSALT = "patchforge"
BINNED_KINDS = ("scale_up", "scale_down", "rotation", "joint")

# pyplot 的全局状态不是线程安全的
_PLOT_LOCK = threading.Lock()


def series_gid(variant: str) -> str:
    return "series-" + re.sub(r"[^A-Za-z0-9_.-]", "_", variant)


def _save_svg(fig, file_path: Union[str, Path]) -> Path:
    buffer = io.StringIO()
    with matplotlib.rc_context({"svg.hashsalt": SVG_HASHSALT, "svg.fonttype": "path"}):
        fig.savefig(buffer, format="svg", metadata={"Date": None})
    plt.close(fig)
    return file_processor.atomic_write_bytes(file_path, buffer.getvalue().encode("utf-8"))


def _binned_series(records: Sequence[ExperimentRecord]) -> Dict[str, Dict[float, List[float]]]:
    """按变体汇总：每个分箱中心上各目标成功率的列表"""
    series: Dict[str, Dict[float, List[float]]] = {}
    for record in records:
        if record.bin_low is None or record.bin_high is None:
            continue
        center = (record.bin_low + record.bin_high) / 2
        series.setdefault(record.variant, {}).setdefault(center, []).append(record.success_rate)
    return series


def plot_binned(records: Sequence[ExperimentRecord], file_path: Union[str, Path], xlabel: str, title: str) -> Path:
    """每个训练支撑变体一条折线：测试条件分箱 → 目标类别平均成功率"""
    series = _binned_series(records)
    if not series:
        raise ConfigError("没有带分箱的记录")
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for variant in sorted(series):
        points = sorted(series[variant].items())
        xs = [x for x, _ in points]
        ys = [float(np.mean(v)) for _, v in points]
        line, = ax.plot(xs, ys, marker="o", markersize=3, linewidth=1.5, label=variant)
        line.set_gid(series_gid(variant))
    ax.set_xlabel(xlabel)
    ax.set_ylabel("targeted success rate")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(title, fontsize=10)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=7, loc="best")
    fig.tight_layout()
    return _save_svg(fig, file_path)


def plot_location(records: Sequence[ExperimentRecord], file_path: Union[str, Path]) -> Path:
    """训练放置策略 × 测试放置策略的平均成功率热图"""
    strategies = sorted({r.variant for r in records} | {r.test_condition for r in records})
    index = {name: i for i, name in enumerate(strategies)}
    sums = np.zeros((len(strategies), len(strategies)))
    counts = np.zeros_like(sums)
    for record in records:
        sums[index[record.variant], index[record.test_condition]] += record.success_rate
        counts[index[record.variant], index[record.test_condition]] += 1
    grid = np.divide(sums, counts, out=np.full_like(sums, np.nan), where=counts > 0)

    fig, ax = plt.subplots(figsize=(5, 4.5))
    image = ax.imshow(grid, vmin=0.0, vmax=1.0, cmap="viridis")
    image.set_gid("location-grid")
    for i in range(len(strategies)):
        for j in range(len(strategies)):
            if counts[i, j]:
                ax.text(j, i, f"{grid[i, j]:.2f}", ha="center", va="center", color="white", fontsize=9)
    ax.set_xticks(range(len(strategies)))
    ax.set_xticklabels(strategies, fontsize=8)
    ax.set_yticks(range(len(strategies)))
    ax.set_yticklabels(strategies, fontsize=8)
    ax.set_xlabel("test placement")
    ax.set_ylabel("train placement")
    fig.colorbar(image, ax=ax, fraction=0.046)
    fig.tight_layout()
    return _save_svg(fig, file_path)


def plot_transparency(records: Sequence[ExperimentRecord], file_path: Union[str, Path]) -> Path:
    """
    成对散点：横轴对照补丁成功率，纵轴半透明补丁成功率；
    点大小对应补丁缩放比例，颜色对应显眼度
    """
    semi = {r.target: r for r in records if r.variant == "semi"}
    control = {r.target: r for r in records if r.variant == "control"}
    targets = sorted(set(semi) & set(control))
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot([0, 1], [0, 1], color="gray", linestyle="--", linewidth=1)
    if targets:
        xs = [control[t].success_rate for t in targets]
        ys = [semi[t].success_rate for t in targets]
        sizes = [2000 * semi[t].extra.get("scale", 0.45) ** 2 for t in targets]
        shades = [semi[t].extra.get("obtrusiveness", 1.0) for t in targets]
        points = ax.scatter(xs, ys, s=sizes, c=shades, cmap="Greys", vmin=0.0, vmax=1.0, edgecolors="black")
        points.set_gid("series-pairs")
        for t, x, y in zip(targets, xs, ys):
            ax.annotate(str(t), (x, y), fontsize=7, xytext=(4, 4), textcoords="offset points")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.set_xlabel("opaque control success")
    ax.set_ylabel("semi-transparent success")
    fig.tight_layout()
    return _save_svg(fig, file_path)


def plot_bars(records: Sequence[ExperimentRecord], file_path: Union[str, Path], title: str) -> Path:
    """每个目标类别一根柱，带 Wilson 区间误差线"""
    ordered = sorted(records, key=lambda r: (r.target, r.test_condition))
    labels = [str(r.target) for r in ordered]
    rates = np.array([r.success_rate for r in ordered])
    errors = np.array([[r.success_rate - r.ci_low for r in ordered], [r.ci_high - r.success_rate for r in ordered]])
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(np.arange(len(ordered)), rates, yerr=errors, capsize=3, color="#667EEA")
    ax.set_xticks(np.arange(len(ordered)))
    ax.set_xticklabels(labels)
    ax.set_xlabel("target class")
    ax.set_ylabel("targeted success rate")
    ax.set_ylim(0.0, 1.02)
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    return _save_svg(fig, file_path)


def plot_records(records: Sequence[ExperimentRecord], out_dir: Union[str, Path], stem: str = "report") -> Dict[str, Path]:
    """
    按实验类型各画一张图

    Returns:
        {实验类型: SVG 路径}
    """
    out_dir = Path(out_dir)
    by_kind: Dict[str, List[ExperimentRecord]] = {}
    for record in records:
        by_kind.setdefault(record.kind, []).append(record)

    paths: Dict[str, Path] = {}
    with _PLOT_LOCK:
        for kind in sorted(by_kind):
            group = by_kind[kind]
            path = out_dir / f"{stem}_{kind}.svg"
            if kind in BINNED_KINDS:
                xlabel = "test angle (rad)" if kind == ExperimentKind.ROTATION.value else "test scale"
                paths[kind] = plot_binned(group, path, xlabel, f"{kind}: success vs {xlabel}")
            elif kind == ExperimentKind.LOCATION.value:
                paths[kind] = plot_location(group, path)
            elif kind == ExperimentKind.TRANSPARENCY.value:
                paths[kind] = plot_transparency(group, path)
            else:
                paths[kind] = plot_bars(group, path, f"{kind}: success per target")
            logger.info(f"图表已写出: {paths[kind]}")
    return paths
