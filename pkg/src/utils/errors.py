"""
异常定义模块
工具包内所有可预期错误的统一基类及其子类
"""
from typing import Optional


class PatchForgeError(Exception):
    """工具包错误基类"""


class ConfigError(PatchForgeError):
    """配置缺失或取值非法"""


class ShapeError(PatchForgeError, ValueError):
    """张量形状不匹配"""


class NonFiniteError(PatchForgeError, ValueError):
    """输入或损失中出现 NaN"""


class EmptyPoolError(PatchForgeError, ValueError):
    """图像池为空"""


class PlacementError(PatchForgeError, ValueError):
    """补丁在图像内没有合法放置位置"""

    def __init__(self, message: str, scale: Optional[float] = None):
        super().__init__(message)
        self.scale = scale


class DivergenceError(PatchForgeError):
    """训练或优化发散（损失为 NaN）"""

    def __init__(
        self,
        message: str,
        iteration: Optional[int] = None,
        learning_rate: Optional[float] = None,
        checkpoint: Optional[str] = None
    ):
        super().__init__(message)
        self.iteration = iteration
        self.learning_rate = learning_rate
        self.checkpoint = checkpoint


class DatasetFormatError(PatchForgeError, ValueError):
    """数据集文件格式错误"""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (字节偏移 {offset})"
        super().__init__(message)
        self.offset = offset


class ModelFormatError(PatchForgeError, ValueError):
    """模型容器文件损坏或版本不符"""
