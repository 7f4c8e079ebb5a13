"""
文件处理模块
负责图像、数组与 JSON 产物的读写（统一先写临时文件再原子替换）以及数据目录扫描
"""
import io
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np
from PIL import Image

from .errors import DatasetFormatError

PathLike = Union[str, Path]


class FileProcessor:
    """文件处理器"""

    def __init__(self):
        """初始化文件处理器"""
        self.logger = logging.getLogger(__name__)
        self.supported_formats = [".png"]

    def atomic_write_bytes(self, file_path: PathLike, payload: bytes) -> Path:
        """
        原子写入：同目录临时文件写完后 os.replace

        Args:
            file_path: 目标路径
            payload: 文件内容

        Returns:
            目标路径
        """
        file_path = Path(file_path)
        file_path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(dir=file_path.parent, prefix=f".{file_path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, 'wb') as f:
                f.write(payload)
            os.replace(tmp_name, file_path)
        except BaseException:
            Path(tmp_name).unlink(missing_ok=True)
            raise
        return file_path

    def write_json(self, data: Any, file_path: PathLike) -> Path:
        """JSON 产物：键排序、固定缩进，相同内容得到相同字节"""
        text = json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
        return self.atomic_write_bytes(file_path, text.encode('utf-8'))

    def read_json(self, file_path: PathLike) -> Any:
        with open(file_path, 'r', encoding='utf-8') as f:
            return json.load(f)

    def save_array(self, array: np.ndarray, file_path: PathLike) -> Path:
        """以 .npy 保存精确数值"""
        buffer = io.BytesIO()
        np.save(buffer, np.ascontiguousarray(array), allow_pickle=False)
        return self.atomic_write_bytes(file_path, buffer.getvalue())

    def load_array(self, file_path: PathLike) -> np.ndarray:
        return np.load(file_path, allow_pickle=False)

    def array_to_image(self, array: np.ndarray) -> Image.Image:
        """
        (C, H, W) 或 (H, W) 的 [0,1] 数组转换为 PIL 图像

        Args:
            array: 像素数组，C 为 1 或 3

        Returns:
            PIL 图像（L 或 RGB 模式）
        """
        array = np.asarray(array, dtype=np.float64)
        if array.ndim == 3:
            array = array[0] if array.shape[0] == 1 else np.transpose(array, (1, 2, 0))
        pixels = np.round(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8)
        return Image.fromarray(pixels, mode="L" if pixels.ndim == 2 else "RGB")

    def save_image_png(self, array: np.ndarray, file_path: PathLike) -> Path:
        """保存为 PNG（8 位量化，仅用于查看）"""
        buffer = io.BytesIO()
        self.array_to_image(array).save(buffer, format="PNG")
        path = self.atomic_write_bytes(file_path, buffer.getvalue())
        self.logger.debug(f"图像已保存: {path}")
        return path

    def load_image_png(self, file_path: PathLike, channels: int = 3) -> np.ndarray:
        """
        读取 PNG 为 (C, H, W) 的 [0,1] 浮点数组

        Args:
            file_path: 图像路径
            channels: 1 为灰度，3 为 RGB

        Returns:
            像素数组
        """
        with Image.open(file_path) as img:
            img = img.convert("L" if channels == 1 else "RGB")
            pixels = np.asarray(img, dtype=np.float64) / 255.0
        if pixels.ndim == 2:
            return pixels[None]
        return np.ascontiguousarray(np.transpose(pixels, (2, 0, 1)))

    def validate_image_file(self, file_path: PathLike) -> Tuple[bool, str]:
        """
        验证图像文件

        Returns:
            (是否有效, 错误信息)
        """
        file_path = Path(file_path)
        if not file_path.exists():
            return False, f"文件不存在: {file_path}"
        if file_path.suffix.lower() not in self.supported_formats:
            return False, f"不支持的文件格式: {file_path.suffix}"
        try:
            with Image.open(file_path) as img:
                img.verify()
            return True, ""
        except Exception as e:
            return False, f"无效的图像文件: {e}"


class DirectoryScanner:
    """按类别子目录组织的图像目录扫描器"""

    def __init__(self):
        self.logger = logging.getLogger(__name__)
        self.file_processor = FileProcessor()

    def scan_labeled_directory(self, directory: PathLike) -> Dict[str, Any]:
        """
        扫描 <目录>/<类别编号>/*.png 结构

        Args:
            directory: 数据根目录

        Returns:
            {"files": [(路径, 标签)], "errors": [...], "classes": [...]}

        Raises:
            DatasetFormatError: 目录不存在或子目录名不是整数
        """
        directory = Path(directory)
        if not directory.is_dir():
            raise DatasetFormatError(f"数据目录不存在: {directory}")

        files: List[Tuple[str, int]] = []
        errors: List[str] = []
        class_dirs = [d for d in directory.iterdir() if d.is_dir() and not d.name.startswith('.')]
        for class_dir in class_dirs:
            if not class_dir.name.isdigit():
                raise DatasetFormatError(f"类别目录名必须是非负整数: {class_dir.name}")

        class_dirs.sort(key=lambda d: int(d.name))
        classes = [int(d.name) for d in class_dirs]
        for class_dir, label in zip(class_dirs, classes):
            for item in sorted(class_dir.glob("*")):
                if not item.is_file() or item.suffix.lower() not in self.file_processor.supported_formats:
                    continue
                is_valid, error_msg = self.file_processor.validate_image_file(item)
                if is_valid:
                    files.append((str(item), label))
                else:
                    errors.append(f"{item}: {error_msg}")

        self.logger.info(f"目录扫描完成: {directory}, {len(classes)} 个类别, {len(files)} 个有效图像")
        return {"files": files, "errors": errors, "classes": classes}


# 全局实例
file_processor = FileProcessor()
directory_scanner = DirectoryScanner()
