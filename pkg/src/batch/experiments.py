"""
实验协议
基础实验、缩放扫描、旋转扫描、位置网格、半透明对照研究以及缩放与旋转联合扫描
"""
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..attack.geometry import LocationStrategy, TransformSupport
from ..attack.patch import (
    AttackConfig, EvaluationResult, evaluate_attack, optimize_patch, save_patch_bundle, wilson_interval
)
from ..attack.saliency import SaliencyCache
from ..attack.transparency import (
    TransparentConfig, detect_loss_spikes, image_relative_opacity, optimize_opacity_matched_control,
    optimize_transparent, opacity_matched, save_mask_bundle
)
from ..model.dataset import Dataset
from ..model.network import Model
from ..utils.config import ConfigManager
from ..utils.errors import ConfigError, PlacementError
from ..utils.file_handler import file_processor
from .core import Cell, CellStatus, ExperimentKind, ExperimentPlan, ExperimentRecord, ProgressTracker, cell_seed
from .scheduler import CellScheduler

logger = logging.getLogger(__name__)

LOCATION_STRATEGIES = ("random", "saliency_min", "saliency_max")


@dataclass
class ExperimentContext:
    """实验运行环境：模型、图像池、留出测试集与各段配置"""
    model: Model
    pool: Dataset
    test: Dataset
    out_dir: Path
    attack: AttackConfig
    transparent: TransparentConfig
    evaluation: Dict[str, Any]
    experiments: Dict[str, Any]
    master_seed: int
    workers: int = 1
    eval_workers: int = 1
    progress: bool = False
    resume: bool = False
    pool_saliency: SaliencyCache = field(init=False, repr=False)
    test_saliency: SaliencyCache = field(init=False, repr=False)
    failures: List[str] = field(init=False, default_factory=list)

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        n_test = int(self.evaluation.get("test_images", len(self.test)))
        if n_test <= 0:
            raise ConfigError(f"evaluation.test_images 必须为正: {n_test}")
        if n_test < len(self.test):
            self.test = self.test.subset(np.arange(n_test), "test")
        # 训练池与测试集的图像编号可能重叠，显著性缓存分开
        self.pool_saliency = SaliencyCache(self.model)
        self.test_saliency = SaliencyCache(self.model)

    @classmethod
    def from_config(
        cls,
        config: ConfigManager,
        model: Model,
        pool: Dataset,
        test: Dataset,
        out_dir: Optional[Path] = None,
        seed: Optional[int] = None,
        workers: Optional[int] = None,
        progress: bool = False,
        resume: bool = False
    ) -> "ExperimentContext":
        """由配置管理器构造"""
        dtype = config.get("numerics.run_dtype", "float32")
        return cls(
            model=model,
            pool=pool,
            test=test,
            out_dir=Path(out_dir) if out_dir else config.get_out_dir(),
            attack=AttackConfig.from_config(config.get("attack", {}), dtype=dtype),
            transparent=TransparentConfig.from_config(config.get("transparency", {}), dtype=dtype),
            evaluation=dict(config.get("evaluation", {})),
            experiments=dict(config.get("experiments", {})),
            master_seed=int(seed if seed is not None else config.get("experiments.seed", 2020)),
            workers=int(workers if workers is not None else config.get("batch.max_workers", 1)),
            progress=progress,
            resume=resume,
        )

    @property
    def n_samples(self) -> int:
        return int(self.evaluation.get("transform_samples", 4))

    def targets(self) -> List[int]:
        """按主种子均匀抽取的目标类别（升序）"""
        configured = self.experiments.get("targets")
        if configured:
            return sorted(int(t) for t in configured)
        count = min(int(self.experiments.get("num_targets", 10)), self.model.num_classes)
        rng = np.random.default_rng(cell_seed(self.master_seed, "targets"))
        return sorted(int(t) for t in rng.choice(self.model.num_classes, size=count, replace=False))

    def base_support(self) -> TransformSupport:
        return self.attack.support

    def cell_dir(self, cell: Cell) -> Path:
        return self.out_dir / cell.kind.value / cell.cell_id

    def eval_seed(self, target: int, tag: str = "") -> int:
        """同一目标在不同单元间共用评估种子，成对比较使用相同的图像与变换流"""
        return cell_seed(self.master_seed, f"eval:{target}:{tag}")


# ---------------------------------------------------------------------------
# 分箱统计
# ---------------------------------------------------------------------------

def bin_edges(low: float, high: float, count: int) -> np.ndarray:
    if count <= 0 or not low < high:
        raise ConfigError(f"分箱参数无效: [{low}, {high}], {count} 个")
    return np.linspace(low, high, count + 1)


def bin_support(support: TransformSupport, key: str, low: float, high: float) -> TransformSupport:
    """把支撑集在 key 维度上收窄到一个分箱"""
    if key == "scale":
        return replace(support, scale_low=float(low), scale_high=float(high))
    if key == "theta":
        return replace(support, theta_offset=float((low + high) / 2), theta_max=float((high - low) / 2))
    raise ConfigError(f"未知分箱维度: {key}")


def aggregate_trials(trials: Sequence[Mapping[str, Any]], edges: Sequence[float], key: str) -> List[Dict[str, Any]]:
    """
    由逐次试验日志重新计算分箱成功率

    Args:
        trials: 试验日志（含 key 与 success 字段）
        edges: 分箱边界（升序，n+1 个）
        key: 分箱依据的字段，如 "scale" 或 "theta"

    Returns:
        每个分箱一项：bin_low、bin_high、trials、successes、success_rate、ci_low、ci_high
    """
    edges = np.asarray(edges, dtype=np.float64)
    count = len(edges) - 1
    values = np.array([entry[key] for entry in trials], dtype=np.float64)
    hits = np.array([bool(entry["success"]) for entry in trials], dtype=bool)
    index = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, count - 1)

    bins = []
    for k in range(count):
        in_bin = index == k
        n = int(in_bin.sum())
        s = int(hits[in_bin].sum())
        low, high = wilson_interval(s, n) if n else (0.0, 0.0)
        bins.append({
            "bin_low": float(edges[k]),
            "bin_high": float(edges[k + 1]),
            "trials": n,
            "successes": s,
            "success_rate": s / n if n else float("nan"),
            "ci_low": low,
            "ci_high": high,
        })
    return bins


def _per_image_stats(result: EvaluationResult) -> Dict[str, Any]:
    rates = np.array([result.per_image[i] for i in result.image_ids])
    return {
        "per_image_mean": float(rates.mean()),
        "per_image_std": float(rates.std()),
        "per_image_min": float(rates.min()),
        "per_image_max": float(rates.max()),
        "images": int(len(rates)),
        "per_image": [float(r) for r in rates],
    }


def _record(cell: Cell, condition: str, result: Mapping[str, Any], artifacts: Dict[str, str],
            bin_low: Optional[float] = None, bin_high: Optional[float] = None,
            variant: Optional[str] = None, **extra) -> ExperimentRecord:
    if cell.parameters.get("support_outside_test"):
        extra["support_outside_test"] = True
    return ExperimentRecord(
        cell_id=cell.cell_id,
        kind=cell.kind.value,
        variant=variant if variant is not None else cell.variant,
        target=cell.target,
        train_support=cell.train_support.to_dict(),
        test_condition=condition,
        bin_low=bin_low,
        bin_high=bin_high,
        success_rate=float(result["success_rate"]),
        trials=int(result["trials"]),
        successes=int(result["successes"]),
        ci_low=float(result["ci_low"]),
        ci_high=float(result["ci_high"]),
        artifact_paths=dict(artifacts),
        seed=cell.seed,
        extra=extra,
    )


# ---------------------------------------------------------------------------
# 单元执行
# ---------------------------------------------------------------------------

def _evaluate_binned(ctx: ExperimentContext, cell: Cell, patch: np.ndarray, key: str,
                     edges: Sequence[float]) -> List[Dict[str, Any]]:
    """分箱分层评估：每个分箱单独采样同样多的变换"""
    trials: List[Dict[str, Any]] = []
    for k in range(len(edges) - 1):
        support = bin_support(cell.test_support, key, edges[k], edges[k + 1])
        result = evaluate_attack(patch, ctx.model, ctx.test, cell.target, support, ctx.n_samples,
                                 seed=ctx.eval_seed(cell.target, f"{key}{k}"), workers=ctx.eval_workers,
                                 saliency_provider=ctx.test_saliency)
        trials.extend(result.trial_log)
    return trials


def _run_opaque_cell(ctx: ExperimentContext, cell: Cell, cell_dir: Path) -> Tuple[List[ExperimentRecord], Dict[str, str], List[Dict]]:
    config = replace(ctx.attack, support=cell.train_support, seed=cell.seed)
    patch = optimize_patch(ctx.model, cell.target, ctx.pool, config, ctx.pool_saliency, ctx.progress)
    artifacts = {key: Path(path).name for key, path in save_patch_bundle(patch, cell_dir).items()}

    params = cell.parameters
    key = params.get("bin_key")
    records: List[ExperimentRecord] = []
    if key:
        edges = params["edges"]
        trials = _evaluate_binned(ctx, cell, patch.pixels, key, edges)
        for entry in aggregate_trials(trials, edges, key):
            if entry["trials"] == 0:
                continue
            condition = f"{key}∈[{entry['bin_low']:.6g}, {entry['bin_high']:.6g})"
            records.append(_record(cell, condition, entry, artifacts, entry["bin_low"], entry["bin_high"],
                                   loss_decreased=patch.metadata["loss_decreased"]))
        return records, artifacts, trials

    trials = []
    for location in params.get("test_locations", [cell.test_support.location.value]):
        support = replace(cell.test_support, location=LocationStrategy(location))
        result = evaluate_attack(patch.pixels, ctx.model, ctx.test, cell.target, support, ctx.n_samples,
                                 seed=ctx.eval_seed(cell.target), workers=ctx.eval_workers,
                                 saliency_provider=ctx.test_saliency)
        for entry in result.trial_log:
            entry["test_location"] = location
        trials.extend(result.trial_log)
        records.append(_record(cell, location if cell.kind == ExperimentKind.LOCATION else "full",
                               result.summary(), artifacts, loss_decreased=patch.metadata["loss_decreased"],
                               test_location=location, **_per_image_stats(result)))
    return records, artifacts, trials


def _run_transparency_cell(ctx: ExperimentContext, cell: Cell, cell_dir: Path) -> Tuple[List[ExperimentRecord], Dict[str, str], List[Dict]]:
    config = replace(ctx.transparent, support=cell.train_support, seed=cell.seed)
    semi = optimize_transparent(ctx.model, cell.target, ctx.pool, config, ctx.pool_saliency, ctx.progress)
    artifacts = {key: Path(path).name for key, path in save_mask_bundle(semi, cell_dir, "semi").items()}
    eval_seed = ctx.eval_seed(cell.target, "transparency")
    edge = min(ctx.test.image_shape[-2:])
    semi_scale = (cell.train_support.scale_low + cell.train_support.scale_high) / 2
    decays, spikes = detect_loss_spikes(semi.target_trace, semi.gamma_trace, config.schedule.threshold)

    semi_result = evaluate_attack(semi.patch.pixels, ctx.model, ctx.test, cell.target, cell.train_support,
                                  ctx.n_samples, seed=eval_seed, mask=semi.mask, workers=ctx.eval_workers,
                                  saliency_provider=ctx.test_saliency)
    for entry in semi_result.trial_log:
        entry["variant"] = "semi"
    trials = list(semi_result.trial_log)
    records = [_record(
        cell, "semi", semi_result.summary(), artifacts, variant="semi",
        obtrusiveness=semi.obtrusiveness, scale=semi_scale,
        image_relative_opacity=image_relative_opacity(semi_scale, semi.obtrusiveness),
        converged=semi.converged, gamma_decays=decays, loss_spikes=spikes, image_ids=semi_result.image_ids,
    )]

    try:
        control = optimize_opacity_matched_control(ctx.model, semi, ctx.pool, config, ctx.pool_saliency, ctx.progress)
    except PlacementError as e:
        logger.warning(f"{cell.cell_id}: 无法构造对照补丁，跳过该对 ({e})")
        records[0].extra["control_skipped"] = str(e)
        return records, artifacts, trials

    control_files = save_patch_bundle(control, cell_dir, "control")
    artifacts.update({f"control_{key}": Path(path).name for key, path in control_files.items()})
    control_result = evaluate_attack(control.pixels, ctx.model, ctx.test, cell.target, control.support,
                                     ctx.n_samples, seed=eval_seed, workers=ctx.eval_workers,
                                     saliency_provider=ctx.test_saliency)
    for entry in control_result.trial_log:
        entry["variant"] = "control"
    trials.extend(control_result.trial_log)
    control_scale = (control.support.scale_low + control.support.scale_high) / 2
    records.append(_record(
        cell, "control", control_result.summary(), artifacts, variant="control",
        obtrusiveness=1.0, scale=control_scale,
        image_relative_opacity=image_relative_opacity(control_scale, 1.0),
        matched=opacity_matched(semi_scale, semi.obtrusiveness, control_scale, edge),
        image_ids=control_result.image_ids,
    ))
    return records, artifacts, trials


def run_cell(ctx: ExperimentContext, cell: Cell, cell_dir: Optional[Path] = None) -> Tuple[List[ExperimentRecord], Dict[str, str]]:
    """
    执行一个实验单元并持久化全部产物

    产物路径以单元目录为基准记录，记录与产物字节只取决于种子与配置。

    Args:
        ctx: 实验环境
        cell: 实验单元
        cell_dir: 输出目录，缺省为 <out_dir>/<kind>/<cell_id>

    Returns:
        (记录列表, 产物路径)
    """
    cell_dir = Path(cell_dir) if cell_dir is not None else ctx.cell_dir(cell)
    file_processor.write_json(cell.to_dict(), cell_dir / "cell.json")
    if cell.kind == ExperimentKind.TRANSPARENCY:
        records, artifacts, trials = _run_transparency_cell(ctx, cell, cell_dir)
    else:
        records, artifacts, trials = _run_opaque_cell(ctx, cell, cell_dir)

    artifacts["trials"] = "trials.json"
    artifacts["records"] = "records.json"
    for record in records:
        record.artifact_paths = dict(artifacts)
    file_processor.write_json(trials, cell_dir / "trials.json")
    file_processor.write_json([r.to_dict(include_wall_time=False) for r in records], cell_dir / "records.json")
    return records, artifacts


def load_cell_records(cell_dir: Path) -> List[ExperimentRecord]:
    """读回单元目录中的 records.json"""
    return [ExperimentRecord.from_dict(data) for data in file_processor.read_json(Path(cell_dir) / "records.json")]


def run_plan(ctx: ExperimentContext, plan: ExperimentPlan) -> List[ExperimentRecord]:
    """在线程池中执行计划的全部单元，返回已完成单元的记录"""
    plan.validate()
    tracker = ProgressTracker()
    tracker.add_progress_callback(lambda p: logger.info(
        f"{plan.kind.value}: {p['completed_cells']}/{p['total_cells']} 完成, "
        f"{p['failed_cells']} 失败 ({p['progress_percentage']:.0f}%)"
    ))
    scheduler = CellScheduler(ctx.workers, tracker)
    queue = scheduler.run(
        plan.cells,
        lambda cell: run_cell(ctx, cell),
        manifest_path=ctx.out_dir / plan.kind.value / "manifest.json",
        plan=plan,
        resume=ctx.resume,
        load_records=lambda cell: load_cell_records(ctx.cell_dir(cell)),
    )
    records = queue.records()
    failed = [cell.cell_id for cell in queue.get_cells_by_status(CellStatus.FAILED)]
    if failed:
        ctx.failures.extend(failed)
        logger.warning(f"{plan.kind.value}: {len(failed)} 个单元失败，详见清单")
    return records


def reproduce_cell(cell_dir: Path, ctx: ExperimentContext, out_dir: Optional[Path] = None) -> List[ExperimentRecord]:
    """
    按持久化的单元配置与种子重新执行一个单元

    Args:
        cell_dir: 原单元目录（含 cell.json）
        ctx: 实验环境（模型与数据需与原运行一致）
        out_dir: 重跑产物目录，缺省为 <cell_dir>_replay

    Returns:
        重跑得到的记录
    """
    cell_dir = Path(cell_dir)
    cell = Cell.from_dict(file_processor.read_json(cell_dir / "cell.json"))
    target_dir = Path(out_dir) if out_dir is not None else cell_dir.with_name(cell_dir.name + "_replay")
    records, _ = run_cell(ctx, cell, target_dir)
    return records


# ---------------------------------------------------------------------------
# 实验计划
# ---------------------------------------------------------------------------

def _plan(ctx: ExperimentContext, kind: ExperimentKind, test_support: TransformSupport,
          cells: List[Cell], settings: Dict[str, Any]) -> ExperimentPlan:
    return ExperimentPlan(kind=kind, cells=cells, test_support=test_support, targets=ctx.targets(),
                          master_seed=ctx.master_seed, model_checksum=ctx.model.checksum(), settings=settings)


def _cell(ctx: ExperimentContext, kind: ExperimentKind, variant: str, tag: str, target: int,
          train: TransformSupport, test: TransformSupport, **parameters) -> Cell:
    cell_id = f"{kind.value}-{tag}-t{target}"
    return Cell(cell_id=cell_id, kind=kind, variant=variant, target=target, train_support=train,
                test_support=test, seed=cell_seed(ctx.master_seed, cell_id), parameters=parameters)


def build_base_plan(ctx: ExperimentContext) -> ExperimentPlan:
    support = ctx.base_support()
    cells = [_cell(ctx, ExperimentKind.BASE, "base", "base", t, support, support) for t in ctx.targets()]
    return _plan(ctx, ExperimentKind.BASE, support, cells, {})


def build_scale_plan(ctx: ExperimentContext, kind: ExperimentKind) -> ExperimentPlan:
    """[s_o, s_max]（scale_up）或 [s_min, s_o]（scale_down）训练，在 [s_min, s_max] 上分箱测试"""
    s_min = float(ctx.experiments.get("scale_min", 0.05))
    s_max = float(ctx.experiments.get("scale_max", 0.5))
    grid = [float(s) for s in ctx.experiments.get("scale_grid", [0.1, 0.2, 0.3, 0.4])]
    edges = bin_edges(s_min, s_max, int(ctx.evaluation.get("scale_bins", 10))).tolist()
    base = TransformSupport(theta_max=0.0, scale_low=s_min, scale_high=s_max, location=LocationStrategy.RANDOM)

    cells = []
    for s_o in grid:
        if kind == ExperimentKind.SCALE_UP:
            train = replace(base, scale_low=s_o)
        elif kind == ExperimentKind.SCALE_DOWN:
            train = replace(base, scale_high=s_o)
        else:
            raise ConfigError(f"缩放扫描不支持 {kind.value}")
        for target in ctx.targets():
            cells.append(_cell(ctx, kind, f"s_o={s_o:g}", f"s{s_o:g}", target, train, base,
                               bin_key="scale", edges=edges))
    return _plan(ctx, kind, base, cells, {"scale_grid": grid, "edges": edges})


def build_rotation_plan(ctx: ExperimentContext) -> ExperimentPlan:
    """θ_max = kπ/n（k = 0..n）训练，在整个圆周上按角度分箱测试"""
    steps = int(ctx.experiments.get("theta_grid_steps", 5))
    scale = float(ctx.experiments.get("rotation_scale", 0.45))
    edges = bin_edges(-math.pi, math.pi, int(ctx.evaluation.get("angle_bins", 16))).tolist()
    test = TransformSupport(theta_max=math.pi, scale_low=scale, scale_high=scale)

    cells = []
    for k in range(steps + 1):
        train = replace(test, theta_max=k * math.pi / steps)
        for target in ctx.targets():
            cells.append(_cell(ctx, ExperimentKind.ROTATION, f"theta_max={k}pi/{steps}", f"k{k}", target,
                               train, test, bin_key="theta", edges=edges))
    return _plan(ctx, ExperimentKind.ROTATION, test, cells, {"theta_grid_steps": steps, "edges": edges})


def build_location_plan(ctx: ExperimentContext) -> ExperimentPlan:
    """三种训练放置策略 × 三种测试放置策略"""
    base = ctx.base_support()
    cells = []
    for train_location in LOCATION_STRATEGIES:
        train = replace(base, location=LocationStrategy(train_location))
        for target in ctx.targets():
            cells.append(_cell(ctx, ExperimentKind.LOCATION, train_location, train_location, target, train, base,
                               test_locations=list(LOCATION_STRATEGIES)))
    return _plan(ctx, ExperimentKind.LOCATION, base, cells, {"strategies": list(LOCATION_STRATEGIES)})


def build_transparency_plan(ctx: ExperimentContext) -> ExperimentPlan:
    support = ctx.transparent.support
    cells = [_cell(ctx, ExperimentKind.TRANSPARENCY, "semi", "semi", t, support, support) for t in ctx.targets()]
    return _plan(ctx, ExperimentKind.TRANSPARENCY, support, cells, {})


def build_joint_plan(ctx: ExperimentContext) -> ExperimentPlan:
    """[s_o, s_max] × [−θ, θ] 联合训练，在完整联合支撑集上测试"""
    s_min = float(ctx.experiments.get("scale_min", 0.05))
    s_max = float(ctx.experiments.get("scale_max", 0.5))
    scale_grid = [float(s) for s in ctx.experiments.get("joint_scale_grid", [0.2, 0.4])]
    theta_grid = [float(t) for t in ctx.experiments.get("joint_theta_grid", [0.0, math.pi / 2.5])]
    edges = bin_edges(s_min, s_max, int(ctx.evaluation.get("scale_bins", 10))).tolist()
    test = TransformSupport(theta_max=math.pi, scale_low=s_min, scale_high=s_max)

    cells = []
    for s_o in scale_grid:
        for theta in theta_grid:
            train = TransformSupport(theta_max=theta, scale_low=s_o, scale_high=s_max)
            for target in ctx.targets():
                cells.append(_cell(ctx, ExperimentKind.JOINT, f"s_o={s_o:g},theta_max={theta:.4g}",
                                   f"s{s_o:g}-th{theta:.4g}", target, train, test, bin_key="scale", edges=edges))
    return _plan(ctx, ExperimentKind.JOINT, test, cells,
                 {"joint_scale_grid": scale_grid, "joint_theta_grid": theta_grid, "edges": edges})


# ---------------------------------------------------------------------------
# 对外入口
# ---------------------------------------------------------------------------

def run_base_experiment(ctx: ExperimentContext) -> List[ExperimentRecord]:
    """基础实验：训练与测试使用同一基础支撑集"""
    return run_plan(ctx, build_base_plan(ctx))


def run_scale_sweep(ctx: ExperimentContext, variants: Sequence[str] = ("scale_up", "scale_down")) -> List[ExperimentRecord]:
    """缩放扫描（两种约束方向）"""
    records: List[ExperimentRecord] = []
    for variant in variants:
        records.extend(run_plan(ctx, build_scale_plan(ctx, ExperimentKind(variant))))
    return records


def run_rotation_sweep(ctx: ExperimentContext) -> List[ExperimentRecord]:
    """旋转扫描"""
    return run_plan(ctx, build_rotation_plan(ctx))


def run_location_grid(ctx: ExperimentContext) -> List[ExperimentRecord]:
    """位置策略 3×3 网格"""
    return run_plan(ctx, build_location_plan(ctx))


def run_transparency_study(ctx: ExperimentContext) -> List[ExperimentRecord]:
    """半透明补丁与同等不透明度对照补丁的成对研究"""
    return run_plan(ctx, build_transparency_plan(ctx))


def run_joint_sweep(ctx: ExperimentContext) -> List[ExperimentRecord]:
    """缩放与旋转联合扫描"""
    return run_plan(ctx, build_joint_plan(ctx))


def summarize_location(records: Sequence[ExperimentRecord], bin_size: int = 3) -> Dict[str, Any]:
    """
    位置网格汇总

    Args:
        records: 位置网格记录
        bin_size: 头部 / 中部 / 尾部目标类别各取几个

    Returns:
        {"cells": 每个 (训练, 测试) 组合的统计, "bins": 按随机/随机单元成功率划分的目标类别}
        单元统计量取自该组合下全部目标的逐图像成功率

    Raises:
        ConfigError: 记录中缺少逐图像成功率
    """
    groups: Dict[Tuple[str, str], List[ExperimentRecord]] = {}
    for record in records:
        if record.kind != ExperimentKind.LOCATION.value:
            continue
        if not record.extra.get("per_image"):
            raise ConfigError(f"{record.cell_id}: 记录中没有逐图像成功率")
        groups.setdefault((record.variant, record.test_condition), []).append(record)

    cells = []
    for (train, test), group in sorted(groups.items()):
        per_image = np.concatenate([np.asarray(r.extra["per_image"], dtype=np.float64) for r in group])
        cells.append({
            "train": train,
            "test": test,
            "mean": float(per_image.mean()),
            "std": float(per_image.std()),
            "min": float(per_image.min()),
            "max": float(per_image.max()),
            "images": int(per_image.size),
            "target_mean": float(np.mean([r.success_rate for r in group])),
            "targets": len(group),
        })

    reference = sorted(groups.get(("random", "random"), []), key=lambda r: (-r.success_rate, r.target))
    ranked = [r.target for r in reference]
    size = min(bin_size, len(ranked))
    start = max(0, (len(ranked) - size) // 2)
    bins = {
        "top": ranked[:size],
        "middle": ranked[start:start + size],
        "bottom": ranked[len(ranked) - size:] if size else [],
    }
    return {"cells": cells, "bins": bins}
