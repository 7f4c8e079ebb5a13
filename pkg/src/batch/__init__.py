"""
实验批处理模块初始化文件
"""
from .core import (
    ExperimentKind, CellStatus, ExperimentRecord, ExperimentPlan, Cell, CellQueue, ProgressTracker,
    cell_seed, CONSTRAINED_KINDS
)
from .scheduler import CellExecutor, CellScheduler
from .experiments import (
    ExperimentContext, aggregate_trials, bin_edges, bin_support, run_cell, run_plan, reproduce_cell,
    build_base_plan, build_scale_plan, build_rotation_plan, build_location_plan, build_transparency_plan,
    build_joint_plan, run_base_experiment, run_scale_sweep, run_rotation_sweep, run_location_grid,
    run_transparency_study, run_joint_sweep, summarize_location, load_cell_records
)

__all__ = [
    'ExperimentKind', 'CellStatus', 'ExperimentRecord', 'ExperimentPlan', 'Cell', 'CellQueue',
    'ProgressTracker', 'cell_seed', 'CONSTRAINED_KINDS', 'CellExecutor', 'CellScheduler',
    'ExperimentContext', 'aggregate_trials', 'bin_edges', 'bin_support', 'run_cell', 'run_plan',
    'reproduce_cell', 'build_base_plan', 'build_scale_plan', 'build_rotation_plan', 'build_location_plan',
    'build_transparency_plan', 'build_joint_plan', 'run_base_experiment', 'run_scale_sweep',
    'run_rotation_sweep', 'run_location_grid', 'run_transparency_study', 'run_joint_sweep',
    'summarize_location', 'load_cell_records'
]
