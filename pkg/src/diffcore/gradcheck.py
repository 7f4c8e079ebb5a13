"""
有限差分梯度校验
"""
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..utils.errors import ShapeError
from .tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

ScalarFn = Callable[[Tensor], Tensor]

# 拐点坐标占比超过该值时不再认为校验有效
KINK_FRACTION_LIMIT = 0.5
# 差分舍入误差的放大系数
ROUNDING_FACTOR = 64.0


@dataclass
class GradCheckReport:
    """逐坐标的梯度校验结果"""
    analytic: np.ndarray
    numeric: np.ndarray
    relative_error: np.ndarray
    nan_mask: np.ndarray
    kink_mask: np.ndarray

    @property
    def smooth_mask(self) -> np.ndarray:
        """可微且数值有限的坐标"""
        return ~(self.nan_mask | self.kink_mask)

    @property
    def degenerate(self) -> bool:
        """平滑坐标为空，或拐点占比过高，无法据此判断梯度是否正确"""
        candidates = int((~self.nan_mask).sum())
        if candidates == 0 or not self.smooth_mask.any():
            return True
        return int(self.kink_mask.sum()) > KINK_FRACTION_LIMIT * candidates

    @property
    def max_relative_error(self) -> float:
        """平滑坐标上的最大相对误差；报告退化时为 inf"""
        if self.degenerate:
            return float("inf")
        return float(self.relative_error[self.smooth_mask].max())

    @property
    def nan_coordinates(self) -> list:
        return [tuple(int(i) for i in idx) for idx in np.argwhere(self.nan_mask)]

    def within(self, rtol: float = 1e-4, atol: float = 0.0) -> bool:
        """平滑坐标上 |解析 − 数值| ≤ atol + rtol·|数值| 是否全部成立"""
        if self.degenerate:
            return False
        mask = self.smooth_mask
        diff = np.abs(self.analytic - self.numeric)[mask]
        bound = atol + rtol * np.abs(self.numeric)[mask]
        return bool(np.all(diff <= bound))


def _central_difference(f: ScalarFn, point: Tensor, index: tuple, step: float) -> float:
    original = point.values[index]
    point.values[index] = original + step
    upper = f(point).item()
    point.values[index] = original - step
    lower = f(point).item()
    point.values[index] = original
    return (upper - lower) / (2 * step)


def grad_check_report(f: ScalarFn, point: Tensor, step: float = 1e-5) -> GradCheckReport:
    """
    对比反向传播梯度与中心差分

    Args:
        f: 以 point 为输入、返回标量张量的函数
        point: 求导位置（会临时被扰动，结束后恢复）
        step: 差分步长

    Returns:
        校验报告
    """
    if step <= 0:
        raise ShapeError(f"差分步长必须为正: {step}")

    saved_values = point.values
    saved_flag = point.requires_grad
    point.values = np.array(saved_values, copy=True)
    try:
        point.requires_grad = True
        point.zero_grad()
        loss = f(point)
        if loss.values.size != 1:
            raise ShapeError(f"梯度校验要求标量函数，当前输出形状 {loss.shape}")
        f0 = float(loss.item())
        backward(loss)
        analytic = np.zeros(point.shape) if point.grad is None else np.asarray(point.grad, dtype=np.float64)
        point.zero_grad()

        numeric = np.zeros(point.shape)
        fine = np.zeros(point.shape)
        with no_grad():
            for index in np.ndindex(*point.shape):
                numeric[index] = _central_difference(f, point, index, step)
                fine[index] = _central_difference(f, point, index, step / 10)
    finally:
        point.values = saved_values
        point.requires_grad = saved_flag

    nan_mask = np.isnan(numeric) | np.isnan(analytic)
    with np.errstate(invalid="ignore"):
        relative_error = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric))
        # 两种步长结果的差异超出舍入噪声，说明差分模板跨过了不可导点
        rounding = ROUNDING_FACTOR * np.finfo(np.float64).eps * max(1.0, abs(f0)) / (step / 10)
        kink_mask = np.abs(numeric - fine) > 1e-6 * np.maximum(1.0, np.abs(numeric)) + rounding
    kink_mask &= ~nan_mask

    if nan_mask.any():
        logger.warning(f"梯度校验中有 {int(nan_mask.sum())} 个坐标出现 NaN")

    report = GradCheckReport(analytic, numeric, relative_error, nan_mask, kink_mask)
    if report.degenerate:
        logger.warning(f"梯度校验无有效坐标: {int(kink_mask.sum())}/{kink_mask.size} 个坐标被判为拐点")
    return report


def grad_check(f: ScalarFn, point: Tensor, step: float = 1e-5) -> float:
    """返回平滑坐标上的最大相对误差"""
    return grad_check_report(f, point, step).max_relative_error
