"""
工具模块初始化文件
"""
from .config import ConfigManager, config_manager
from .file_handler import FileProcessor, DirectoryScanner, file_processor, directory_scanner
from .errors import (
    PatchForgeError, ConfigError, ShapeError, NonFiniteError, EmptyPoolError,
    PlacementError, DivergenceError, DatasetFormatError, ModelFormatError
)

__all__ = [
    'ConfigManager', 'config_manager',
    'FileProcessor', 'DirectoryScanner', 'file_processor', 'directory_scanner',
    'PatchForgeError', 'ConfigError', 'ShapeError', 'NonFiniteError', 'EmptyPoolError',
    'PlacementError', 'DivergenceError', 'DatasetFormatError', 'ModelFormatError'
]
