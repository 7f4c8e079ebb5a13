"""
模型模块初始化文件
"""
from .dataset import (
    Dataset, DatasetFormat, generate_synthetic, ingest_dataset, split_dataset,
    read_idx, write_idx, load_generator_config
)
from .network import (
    LayerSpec, Model, DEFAULT_ARCHITECTURE, LINEAR_ARCHITECTURE,
    build_model, predict, predict_labels, softmax
)
from .storage import save_model, load_model, encode_parameters, decode_parameters, sidecar_path
from .training import TrainConfig, train_classifier, accuracy

__all__ = [
    'Dataset', 'DatasetFormat', 'generate_synthetic', 'ingest_dataset', 'split_dataset',
    'read_idx', 'write_idx', 'load_generator_config',
    'LayerSpec', 'Model', 'DEFAULT_ARCHITECTURE', 'LINEAR_ARCHITECTURE',
    'build_model', 'predict', 'predict_labels', 'softmax',
    'save_model', 'load_model', 'encode_parameters', 'decode_parameters', 'sidecar_path',
    'TrainConfig', 'train_classifier', 'accuracy'
]
