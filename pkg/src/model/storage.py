"""
模型存储
二进制容器：魔数、版本、张量表与小端原始数据，末尾附 SHA-256 校验；旁边写 JSON 元数据
"""
import hashlib
import logging
import struct
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from .. import __version__
from ..utils.errors import ModelFormatError
from ..utils.file_handler import file_processor
from .network import LayerSpec, Model

logger = logging.getLogger(__name__)

MAGIC = b"PFMODEL\0"
FORMAT_VERSION = 1
_CHECKSUM_SIZE = 32

_DTYPE_CODES = {np.dtype('<f4'): 1, np.dtype('<f8'): 2}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}

PathLike = Union[str, Path]


def sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def encode_parameters(params: Dict[str, np.ndarray]) -> bytes:
    """按插入顺序编码参数表"""
    chunks = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(params))]
    for name, value in params.items():
        dtype = np.dtype(value.dtype).newbyteorder('<')
        if dtype not in _DTYPE_CODES:
            raise ModelFormatError(f"不支持的参数精度: {name} ({value.dtype})")
        encoded_name = name.encode('utf-8')
        chunks.append(struct.pack("<H", len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[dtype], value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype=dtype).tobytes())
    body = b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode_parameters(payload: bytes) -> Dict[str, np.ndarray]:
    """
    解码参数表，先校验摘要再解析

    Raises:
        ModelFormatError: 校验失败、魔数或版本不符
    """
    if len(payload) < len(MAGIC) + 6 + _CHECKSUM_SIZE:
        raise ModelFormatError(f"模型文件校验失败: 长度 {len(payload)} 不足")
    body, digest = payload[:-_CHECKSUM_SIZE], payload[-_CHECKSUM_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise ModelFormatError("模型文件校验失败: SHA-256 不一致（文件损坏或被截断）")
    if body[:len(MAGIC)] != MAGIC:
        raise ModelFormatError("模型文件魔数错误")

    offset = len(MAGIC)
    version, count = struct.unpack_from("<HI", body, offset)
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"模型文件版本 {version} 不受支持（当前 {FORMAT_VERSION}）")
    offset += 6

    params: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, offset)
            offset += 2
            name = body[offset:offset + name_len].decode('utf-8')
            offset += name_len
            code, ndim = struct.unpack_from("<BB", body, offset)
            offset += 2
            shape = struct.unpack_from(f"<{ndim}I", body, offset)
            offset += 4 * ndim
            if code not in _CODE_DTYPES:
                raise ModelFormatError(f"未知精度代码 {code}: {name}")
            dtype = _CODE_DTYPES[code]
            nbytes = int(np.prod(shape)) * dtype.itemsize
            if offset + nbytes > len(body):
                raise ModelFormatError(f"参数 {name} 数据不完整")
            params[name] = np.frombuffer(body, dtype=dtype, count=int(np.prod(shape)), offset=offset).reshape(shape).astype(dtype.newbyteorder('='))
            offset += nbytes
    except struct.error as e:
        raise ModelFormatError(f"模型文件结构错误（偏移 {offset}）: {e}") from e
    if offset != len(body):
        raise ModelFormatError(f"模型文件末尾有 {len(body) - offset} 字节多余数据")
    return params


def save_model(model: Model, path: PathLike) -> Tuple[Path, Path]:
    """
    保存模型与元数据旁注

    Args:
        model: 模型
        path: 二进制文件路径，元数据写到同名 .json

    Returns:
        (模型文件路径, 元数据路径)
    """
    path = Path(path)
    file_processor.atomic_write_bytes(path, encode_parameters(model.params))
    sidecar = {
        "format_version": FORMAT_VERSION,
        "toolkit_version": __version__,
        "architecture": model.architecture_dicts(),
        "num_classes": model.num_classes,
        "input_shape": list(model.input_shape),
        "parameter_checksum": model.checksum(),
        "metadata": model.metadata,
    }
    meta_path = file_processor.write_json(sidecar, sidecar_path(path))
    logger.info(f"模型已保存: {path}")
    return path, meta_path


def load_model(path: PathLike) -> Model:
    """
    读取模型，参数为只读数组

    Args:
        path: 二进制文件路径

    Returns:
        模型

    Raises:
        ModelFormatError: 文件缺失、损坏或与元数据不一致
    """
    path = Path(path)
    meta_path = sidecar_path(path)
    if not path.exists() or not meta_path.exists():
        raise ModelFormatError(f"模型文件或元数据不存在: {path}")

    params = decode_parameters(path.read_bytes())
    sidecar = file_processor.read_json(meta_path)
    if sidecar.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(f"元数据版本 {sidecar.get('format_version')} 不受支持")

    model = Model(
        architecture=[LayerSpec.from_dict(layer) for layer in sidecar["architecture"]],
        params=params,
        num_classes=sidecar["num_classes"],
        input_shape=tuple(sidecar["input_shape"]),
        metadata=sidecar.get("metadata", {}),
    )
    if model.checksum() != sidecar.get("parameter_checksum", model.checksum()):
        raise ModelFormatError(f"参数摘要与元数据不一致: {path}")
    logger.info(f"模型已加载: {path}")
    return model.freeze()
