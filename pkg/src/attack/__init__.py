"""
攻击模块初始化文件
"""
from .geometry import (
    LocationStrategy, TransformSupport, TransformSpec, image_edge, footprint_box, check_placement,
    sample_transform, build_sampler, warp_batch, warp_patch, apply_patch_opaque
)
from .saliency import (
    SaliencyMap, SaliencyCache, compute_saliency, integral_image, box_sums, select_location, save_saliency_png
)
from .patch import (
    AttackConfig, Patch, EvaluationResult, wilson_interval, init_patch, compose_attacked_batch,
    sample_specs, eot_step, optimize_patch, evaluate_attack, attack_pool,
    save_patch_bundle, load_patch_bundle
)
from .transparency import (
    GammaSchedule, TransparentConfig, TransparentPatch, patch_obtrusiveness, image_relative_opacity,
    blend_apply, joint_loss, gamma_step, detect_loss_spikes, optimize_transparent,
    matched_control_scale, opacity_matched, make_opacity_matched_control,
    optimize_opacity_matched_control, save_mask_bundle, load_mask_bundle
)

__all__ = [
    'LocationStrategy', 'TransformSupport', 'TransformSpec', 'image_edge', 'footprint_box', 'check_placement',
    'sample_transform', 'build_sampler', 'warp_batch', 'warp_patch', 'apply_patch_opaque',
    'SaliencyMap', 'SaliencyCache', 'compute_saliency', 'integral_image', 'box_sums', 'select_location',
    'save_saliency_png',
    'AttackConfig', 'Patch', 'EvaluationResult', 'wilson_interval', 'init_patch', 'compose_attacked_batch',
    'sample_specs', 'eot_step', 'optimize_patch', 'evaluate_attack', 'attack_pool',
    'save_patch_bundle', 'load_patch_bundle',
    'GammaSchedule', 'TransparentConfig', 'TransparentPatch', 'patch_obtrusiveness', 'image_relative_opacity',
    'blend_apply', 'joint_loss', 'gamma_step', 'detect_loss_spikes', 'optimize_transparent',
    'matched_control_scale', 'opacity_matched', 'make_opacity_matched_control',
    'optimize_opacity_matched_control', 'save_mask_bundle', 'load_mask_bundle'
]
