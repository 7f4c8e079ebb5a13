"""
配置管理模块
负责加载默认配置、用户配置与命令行指定的配置文件，并处理输出目录等环境变量
"""
import os
import copy
from pathlib import Path
from typing import Dict, Any, Optional, Union

import yaml
from dotenv import load_dotenv

from .errors import ConfigError


PROJECT_ROOT = Path(__file__).resolve().parents[2]
OUT_DIR_ENV = "PATCHFORGE_OUT"

DEFAULT_CONFIG: Dict[str, Any] = {
    "paths": {
        "out_dir": "output",
        "logs_dir": "logs",
    },
    "numerics": {
        "run_dtype": "float32",
    },
    "dataset": {
        "format": "synthetic",
        "path": None,
        "seed": 7,
        "n_train": 5000,
        "n_test": 1000,
        "num_classes": 10,
        "image_size": 32,
    },
    "training": {
        "epochs": 8,
        "learning_rate": 0.02,
        "batch_size": 64,
        "momentum": 0.9,
        "weight_decay": 0.0005,
        "seed": 0,
    },
    "attack": {
        "iterations": 300,
        "learning_rate": 5.0,
        "batch_images": 16,
        "transforms_per_image": 4,
        "patch_size": 16,
        "init_low": 0.4,
        "init_high": 0.6,
        "scale_low": 0.4,
        "scale_high": 0.5,
        "theta_max": 0.0,
        "location": "random",
    },
    "transparency": {
        "iterations": 1200,
        "learning_rate": 5.0,
        "mask_init": 0.9,
        "gamma_initial": 10.0,
        "gamma_decay": 0.5,
        "gamma_floor": 0.001,
        "loss_threshold": 0.1,
        "patience": 5,
        "control_iterations": 500,
    },
    "evaluation": {
        "test_images": 256,
        "transform_samples": 4,
        "angle_bins": 16,
        "scale_bins": 10,
    },
    "experiments": {
        "num_targets": 10,
        "seed": 2020,
        "scale_grid": [0.1, 0.2, 0.3, 0.4],
        "scale_min": 0.05,
        "scale_max": 0.5,
        "rotation_scale": 0.45,
        "theta_grid_steps": 5,
        "location_bin_size": 3,
        "joint_scale_grid": [0.2, 0.4],
        "joint_theta_grid": [0.0, 1.2566370614359172],
    },
    "batch": {
        "max_workers": 2,
    },
    "logging": {
        "level": "INFO",
        "file_enabled": True,
        "console_enabled": True,
    },
}


class ConfigManager:
    """配置管理器"""

    def __init__(self, config_dir: Union[str, Path, None] = None):
        """
        初始化配置管理器

        Args:
            config_dir: 配置文件目录，默认为项目根目录下的 config
        """
        self.config_dir = Path(config_dir) if config_dir else PROJECT_ROOT / "config"
        self.config_dir.mkdir(parents=True, exist_ok=True)

        # 配置文件路径
        self.env_file = self.config_dir / ".env"
        self.config_file = self.config_dir / "config.yaml"
        self.default_config_file = self.config_dir / "default_config.yaml"

        # 加载环境变量
        load_dotenv(self.env_file)

        # 初始化配置
        self._init_default_config()
        self._load_config()

    def _init_default_config(self) -> None:
        """默认配置文件不存在时写出内置默认值"""
        if not self.default_config_file.exists():
            with open(self.default_config_file, 'w', encoding='utf-8') as f:
                yaml.dump(DEFAULT_CONFIG, f, default_flow_style=False, allow_unicode=True, sort_keys=False)

    def _load_config(self) -> None:
        """加载配置：内置默认值 < 默认配置文件 < 用户配置文件"""
        self.config = copy.deepcopy(DEFAULT_CONFIG)

        with open(self.default_config_file, 'r', encoding='utf-8') as f:
            file_defaults = yaml.safe_load(f)
            if file_defaults:
                self._deep_update(self.config, file_defaults)

        if self.config_file.exists():
            with open(self.config_file, 'r', encoding='utf-8') as f:
                user_config = yaml.safe_load(f)
                if user_config:
                    self._deep_update(self.config, user_config)

    def _deep_update(self, base_dict: Dict, update_dict: Dict) -> None:
        """深度更新字典"""
        for key, value in update_dict.items():
            if key in base_dict and isinstance(base_dict[key], dict) and isinstance(value, dict):
                self._deep_update(base_dict[key], value)
            else:
                base_dict[key] = value

    def load_file(self, file_path: Union[str, Path]) -> None:
        """
        合并命令行指定的配置文件（JSON 或 YAML）

        Args:
            file_path: 配置文件路径

        Raises:
            ConfigError: 文件不存在或无法解析
        """
        file_path = Path(file_path)
        if not file_path.exists():
            raise ConfigError(f"配置文件不存在: {file_path}")

        try:
            with open(file_path, 'r', encoding='utf-8') as f:
                data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"配置文件解析失败: {file_path}, 错误: {e}") from e

        if data is None:
            return
        if not isinstance(data, dict):
            raise ConfigError(f"配置文件顶层必须是映射: {file_path}")
        self._deep_update(self.config, data)

    def get(self, key_path: str, default: Any = None) -> Any:
        """
        获取配置值

        Args:
            key_path: 配置键路径，如 'attack.learning_rate'
            default: 默认值

        Returns:
            配置值
        """
        keys = key_path.split('.')
        value = self.config

        try:
            for key in keys:
                value = value[key]
            return value
        except (KeyError, TypeError):
            return default

    def require(self, key_path: str, kind: type = float, positive: bool = False) -> Any:
        """
        获取必填配置值并做类型检查

        Args:
            key_path: 配置键路径
            kind: 期望类型（int 或 float 等）
            positive: 是否要求严格为正

        Returns:
            转换后的配置值

        Raises:
            ConfigError: 缺失、类型错误或取值非法
        """
        value = self.get(key_path)
        if value is None:
            raise ConfigError(f"缺少配置项: {key_path}")
        try:
            value = kind(value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"配置项类型错误: {key_path}={value!r}") from e
        if positive and not value > 0:
            raise ConfigError(f"配置项必须为正: {key_path}={value!r}")
        return value

    def set(self, key_path: str, value: Any) -> None:
        """
        设置配置值（仅作用于当前进程）

        Args:
            key_path: 配置键路径
            value: 配置值
        """
        keys = key_path.split('.')
        config = self.config

        for key in keys[:-1]:
            if key not in config or not isinstance(config[key], dict):
                config[key] = {}
            config = config[key]

        config[keys[-1]] = value

    def get_out_dir(self, override: Optional[Union[str, Path]] = None) -> Path:
        """
        解析输出目录：命令行参数 > PATCHFORGE_OUT 环境变量 > 配置文件

        Args:
            override: 命令行 --out-dir 的取值

        Returns:
            输出目录绝对路径
        """
        if override:
            return Path(override).resolve()

        env_dir = os.getenv(OUT_DIR_ENV)
        if env_dir:
            return Path(env_dir).resolve()

        return self.get_absolute_path(self.get("paths.out_dir", "output"))

    def get_absolute_path(self, relative_path: Union[str, Path]) -> Path:
        """
        获取相对于项目根目录的绝对路径

        Args:
            relative_path: 相对路径

        Returns:
            绝对路径
        """
        path = Path(relative_path)
        if path.is_absolute():
            return path
        return self.config_dir.parent / path

    def create_directories(self, out_dir: Optional[Path] = None) -> None:
        """创建输出与日志目录"""
        dirs = [
            out_dir or self.get_out_dir(),
            self.get_absolute_path(self.get("paths.logs_dir", "logs")),
        ]

        for dir_path in dirs:
            Path(dir_path).mkdir(parents=True, exist_ok=True)

    def export_config(self, file_path: Union[str, Path]) -> None:
        """
        导出当前生效的配置

        Args:
            file_path: 导出文件路径
        """
        with open(file_path, 'w', encoding='utf-8') as f:
            yaml.dump(self.config, f, default_flow_style=False, allow_unicode=True, sort_keys=False)


# 全局配置管理器实例
config_manager = ConfigManager()
