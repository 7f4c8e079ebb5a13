"""
PatchForge 命令行入口
训练受攻击模型、优化对抗补丁、运行实验扫描并导出报告
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Tuple

# 添加项目根目录到Python路径
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from src.attack import (
    AttackConfig, TransformSupport, TransparentConfig, evaluate_attack, load_patch_bundle, load_mask_bundle,
    optimize_patch, optimize_transparent, save_mask_bundle, save_patch_bundle
)
from src.batch import (
    ExperimentContext, ExperimentKind, run_base_experiment, run_joint_sweep, run_location_grid,
    run_rotation_sweep, run_scale_sweep, run_transparency_study, summarize_location
)
from src.model import Dataset, TrainConfig, ingest_dataset, load_model, save_model, split_dataset, train_classifier
from src.report import emit_report, load_records
from src.utils.config import config_manager
from src.utils.errors import ConfigError, PatchForgeError
from src.utils.file_handler import file_processor

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def setup_logging():
    """设置日志系统"""
    # 确保日志目录存在
    log_dir = config_manager.get_absolute_path(config_manager.get("paths.logs_dir", "logs"))
    log_dir.mkdir(parents=True, exist_ok=True)

    # 配置日志格式
    log_format = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    log_level = config_manager.get("logging.level", "INFO")

    handlers: List[logging.Handler] = []
    if config_manager.get("logging.console_enabled", True):
        handlers.append(logging.StreamHandler(sys.stdout))
    if config_manager.get("logging.file_enabled", True):
        handlers.append(logging.FileHandler(log_dir / "patchforge.log", encoding='utf-8'))

    logging.basicConfig(level=getattr(logging, str(log_level).upper()), format=log_format,
                        handlers=handlers, force=True)

    # 设置第三方库日志级别
    logging.getLogger("PIL").setLevel(logging.WARNING)
    logging.getLogger("matplotlib").setLevel(logging.WARNING)


def load_splits(args) -> Tuple[Dataset, Dataset]:
    """按配置读取数据集并确定性地划分训练集与留出测试集"""
    fmt = config_manager.get("dataset.format", "synthetic")
    path = getattr(args, "dataset", None) or config_manager.get("dataset.path")
    num_classes = config_manager.require("dataset.num_classes", int, positive=True)
    n_test = config_manager.require("dataset.n_test", int, positive=True)
    split_seed = config_manager.require("dataset.seed", int)

    if fmt == "synthetic":
        n_train = config_manager.require("dataset.n_train", int, positive=True)
        full = ingest_dataset(path, fmt, num_classes, n=n_train + n_test, seed=split_seed,
                              image_size=config_manager.require("dataset.image_size", int, positive=True))
    else:
        full = ingest_dataset(path, fmt, num_classes)
    if n_test >= len(full):
        raise ConfigError(f"dataset.n_test={n_test} 不小于数据集大小 {len(full)}")
    return split_dataset(full, n_test, split_seed)


def resolve_model_path(args, out_dir: Path) -> Path:
    if getattr(args, "model", None):
        return Path(args.model)
    return out_dir / "models" / "model.pfm"


def build_support(args, defaults: TransformSupport) -> TransformSupport:
    """命令行中给出的变换参数覆盖默认支撑集"""
    return TransformSupport(
        theta_max=args.theta_max if args.theta_max is not None else defaults.theta_max,
        scale_low=args.scale_low if args.scale_low is not None else defaults.scale_low,
        scale_high=args.scale_high if args.scale_high is not None else defaults.scale_high,
        location=args.location or defaults.location,
    )


def cmd_train_model(args, out_dir: Path) -> int:
    logger = logging.getLogger(__name__)
    train, test = load_splits(args)
    overrides = {"seed": args.seed} if args.seed is not None else {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    config = TrainConfig.from_config(config_manager.get("training", {}),
                                     dtype=config_manager.get("numerics.run_dtype", "float32"), **overrides)
    logger.info(f"开始训练: {len(train)} 张训练图像, {len(test)} 张测试图像")
    model = train_classifier(train, config, test, checkpoint_dir=out_dir / "models" / "checkpoints")
    model_path, meta_path = save_model(model, resolve_model_path(args, out_dir))
    logger.info(f"模型已保存: {model_path} (元数据 {meta_path}), 测试准确率 {model.metadata['test_accuracy']:.4f}")
    return EXIT_OK


def _attack_overrides(args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    return overrides


def cmd_attack(args, out_dir: Path) -> int:
    logger = logging.getLogger(__name__)
    train, test = load_splits(args)
    model = load_model(resolve_model_path(args, out_dir))
    ctx = ExperimentContext.from_config(config_manager, model, train, test, out_dir, args.seed, args.workers, True)
    config = AttackConfig.from_config(config_manager.get("attack", {}), dtype=ctx.attack.dtype, **_attack_overrides(args))
    config.support = build_support(args, config.support)

    patch = optimize_patch(model, args.target, train, config, ctx.pool_saliency)
    target_dir = out_dir / "attack" / f"t{args.target}"
    save_patch_bundle(patch, target_dir)
    result = evaluate_attack(patch.pixels, model, ctx.test, args.target, config.support, ctx.n_samples,
                             seed=ctx.eval_seed(args.target), workers=ctx.eval_workers,
                             saliency_provider=ctx.test_saliency)
    file_processor.write_json(result.summary(), target_dir / "evaluation.json")
    logger.info(f"目标 {args.target}: 成功率 {result.success_rate:.4f} "
                f"[{result.ci_low:.4f}, {result.ci_high:.4f}] ({result.trials} 次试验)")
    return EXIT_OK


def cmd_attack_transparent(args, out_dir: Path) -> int:
    logger = logging.getLogger(__name__)
    train, test = load_splits(args)
    model = load_model(resolve_model_path(args, out_dir))
    ctx = ExperimentContext.from_config(config_manager, model, train, test, out_dir, args.seed, args.workers, True)
    config = TransparentConfig.from_config(config_manager.get("transparency", {}), dtype=ctx.transparent.dtype,
                                           **_attack_overrides(args))
    config.support = build_support(args, config.support)

    semi = optimize_transparent(model, args.target, train, config, ctx.pool_saliency)
    target_dir = out_dir / "attack_transparent" / f"t{args.target}"
    save_mask_bundle(semi, target_dir)
    result = evaluate_attack(semi.patch.pixels, model, ctx.test, args.target, config.support, ctx.n_samples,
                             seed=ctx.eval_seed(args.target), mask=semi.mask, workers=ctx.eval_workers,
                             saliency_provider=ctx.test_saliency)
    summary = result.summary()
    summary.update({"obtrusiveness": semi.obtrusiveness, "converged": semi.converged})
    file_processor.write_json(summary, target_dir / "evaluation.json")
    logger.info(f"目标 {args.target}: PO={semi.obtrusiveness:.4f}, 成功率 {result.success_rate:.4f}")
    return EXIT_OK


def cmd_eval(args, out_dir: Path) -> int:
    logger = logging.getLogger(__name__)
    train, test = load_splits(args)
    model = load_model(resolve_model_path(args, out_dir))
    ctx = ExperimentContext.from_config(config_manager, model, train, test, out_dir, args.seed, args.workers, True)
    patch_dir = Path(args.patch_dir)
    if (patch_dir / "transparent.json").exists():
        bundle = load_mask_bundle(patch_dir)
        patch, mask = bundle.patch, bundle.mask
    else:
        patch, mask = load_patch_bundle(patch_dir), None

    support = build_support(args, patch.support)
    samples = args.samples or ctx.n_samples
    result = evaluate_attack(patch.pixels, model, ctx.test, patch.target, support, samples,
                             seed=ctx.eval_seed(patch.target), mask=mask, workers=ctx.eval_workers,
                             saliency_provider=ctx.test_saliency)
    summary = result.summary()
    summary["test_support"] = support.to_dict()
    file_processor.write_json(summary, patch_dir / "evaluation.json")
    file_processor.write_json(result.trial_log, patch_dir / "trials.json")
    logger.info(f"目标 {patch.target} ({support.describe()}): 成功率 {result.success_rate:.4f} "
                f"[{result.ci_low:.4f}, {result.ci_high:.4f}]")
    return EXIT_OK


SWEEPS = {
    "sweep-scale": ("scale", lambda ctx, args: run_scale_sweep(ctx, args.variants)),
    "sweep-rotation": ("rotation", lambda ctx, args: run_rotation_sweep(ctx)),
    "sweep-location": ("location", lambda ctx, args: run_location_grid(ctx)),
    "study-transparency": ("transparency", lambda ctx, args: run_transparency_study(ctx)),
    "sweep-joint": ("joint", lambda ctx, args: run_joint_sweep(ctx)),
    "base": ("base", lambda ctx, args: run_base_experiment(ctx)),
}


def cmd_sweep(args, out_dir: Path) -> int:
    logger = logging.getLogger(__name__)
    name, runner = SWEEPS[args.command]
    train, test = load_splits(args)
    model = load_model(resolve_model_path(args, out_dir))
    ctx = ExperimentContext.from_config(config_manager, model, train, test, out_dir, args.seed, args.workers, True,
                                        resume=args.resume)
    if args.targets:
        ctx.experiments["targets"] = args.targets

    records = runner(ctx, args)
    if not records:
        logger.error(f"{name}: 没有单元成功完成")
        return EXIT_RUNTIME
    paths = emit_report(records, out_dir / "reports", stem=name)
    config_manager.export_config(out_dir / "reports" / f"{name}_config.yaml")
    if name == "location":
        summary = summarize_location(records, int(ctx.experiments.get("location_bin_size", 3)))
        file_processor.write_json(summary, out_dir / "reports" / "location_summary.json")
    logger.info(f"{name}: {len(records)} 条记录, 报告 {paths}")
    if ctx.failures:
        logger.error(f"{name}: {len(ctx.failures)} 个单元失败: {ctx.failures}")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_report(args, out_dir: Path) -> int:
    records = load_records(args.records)
    paths = emit_report(records, out_dir / "reports", formats=args.formats, stem=args.stem)
    logging.getLogger(__name__).info(f"报告已导出: {paths}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    """构建命令行解析器"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="额外的配置文件 (JSON 或 YAML)")
    common.add_argument("--seed", type=int, help="主随机种子，覆盖配置")
    common.add_argument("--out-dir", type=str, help=f"输出目录，优先于环境变量 PATCHFORGE_OUT")
    common.add_argument("--workers", type=int, help="并发单元数")

    model_args = argparse.ArgumentParser(add_help=False)
    model_args.add_argument("--model", type=str, help="模型文件 (默认: <out-dir>/models/model.pfm)")
    model_args.add_argument("--dataset", type=str, help="数据集路径，覆盖 dataset.path")

    support_args = argparse.ArgumentParser(add_help=False)
    support_args.add_argument("--theta-max", type=float, help="旋转角上限 (弧度)")
    support_args.add_argument("--scale-low", type=float, help="缩放比例下限")
    support_args.add_argument("--scale-high", type=float, help="缩放比例上限")
    support_args.add_argument("--location", choices=["random", "saliency_min", "saliency_max"], help="放置策略")

    parser = argparse.ArgumentParser(description="PatchForge 对抗补丁 EoT 实验工具")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train-model", parents=[common, model_args], help="训练受攻击的分类器") \
        .add_argument("--epochs", type=int, help="训练轮数")

    for name, help_text in (("attack", "优化不透明补丁"), ("attack-transparent", "联合优化补丁与遮罩")):
        p = sub.add_parser(name, parents=[common, model_args, support_args], help=help_text)
        p.add_argument("--target", type=int, required=True, help="目标类别")
        p.add_argument("--iterations", type=int, help="迭代次数")

    p = sub.add_parser("eval", parents=[common, model_args, support_args], help="在给定测试支撑集上评估补丁")
    p.add_argument("--patch-dir", type=str, required=True, help="补丁产物目录")
    p.add_argument("--samples", type=int, help="每张图像的变换采样数")

    for name in SWEEPS:
        p = sub.add_parser(name, parents=[common, model_args], help=f"运行实验: {SWEEPS[name][0]}")
        p.add_argument("--resume", action="store_true", help="从单元清单续跑，跳过已完成的单元")
        p.add_argument("--targets", type=int, nargs="+", help="指定目标类别")
        if name == "sweep-scale":
            p.add_argument("--variants", nargs="+", choices=[ExperimentKind.SCALE_UP.value, ExperimentKind.SCALE_DOWN.value],
                           default=[ExperimentKind.SCALE_UP.value, ExperimentKind.SCALE_DOWN.value], help="约束方向")

    p = sub.add_parser("report", parents=[common], help="由记录导出 CSV / JSON / SVG")
    p.add_argument("--records", type=str, required=True, help="记录文件或实验目录")
    p.add_argument("--formats", nargs="+", default=["csv", "json", "svg"], choices=["csv", "json", "svg"])
    p.add_argument("--stem", type=str, default="report", help="文件名前缀")
    return parser


COMMANDS = {
    "train-model": cmd_train_model,
    "attack": cmd_attack,
    "attack-transparent": cmd_attack_transparent,
    "eval": cmd_eval,
    "report": cmd_report,
    **{name: cmd_sweep for name in SWEEPS},
}


def main(argv: Optional[List[str]] = None) -> int:
    """主函数"""
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        if args.config:
            config_manager.load_file(args.config)
        if args.seed is not None:
            config_manager.set("experiments.seed", args.seed)
        out_dir = config_manager.get_out_dir(args.out_dir)
        config_manager.create_directories(out_dir)
    except ConfigError as e:
        print(f"配置错误: {e}", file=sys.stderr)
        return EXIT_CONFIG

    setup_logging()
    logger = logging.getLogger(__name__)
    logger.info(f"PatchForge {args.command} 启动, 输出目录 {out_dir}")

    try:
        return COMMANDS[args.command](args, out_dir)
    except ConfigError as e:
        logger.error(f"配置错误: {e}")
        return EXIT_CONFIG
    except KeyboardInterrupt:
        logger.info("收到中断信号，已写出的结果保留在输出目录")
        return EXIT_RUNTIME
    except (PatchForgeError, ValueError, OSError) as e:
        logger.error(f"运行失败: {type(e).__name__}: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
