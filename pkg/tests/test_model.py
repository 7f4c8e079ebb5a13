"""
数据集、模型存储与训练测试
"""
import struct

import numpy as np
import pytest

from src.model import (
    DatasetFormat, LayerSpec, build_model, decode_parameters, encode_parameters, generate_synthetic,
    ingest_dataset, load_model, predict, read_idx, save_model, sidecar_path, split_dataset, train_classifier,
    write_idx, TrainConfig
)
from src.utils.errors import ConfigError, DatasetFormatError, EmptyPoolError, ModelFormatError, ShapeError
from src.utils.file_handler import file_processor

SMALL_ARCHITECTURE = (
    LayerSpec("conv", 4),
    LayerSpec("relu"),
    LayerSpec("maxpool"),
    LayerSpec("flatten"),
    LayerSpec("dense"),
)


class TestSyntheticDataset:

    def test_same_seed_is_bit_identical(self):
        a = generate_synthetic(20, seed=11, num_classes=4, image_size=16)
        b = generate_synthetic(20, seed=11, num_classes=4, image_size=16)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_classes_are_balanced_and_pixels_in_range(self):
        data = generate_synthetic(40, seed=1, num_classes=4, image_size=16)
        assert data.images.shape == (40, 3, 16, 16)
        assert np.bincount(data.labels).tolist() == [10, 10, 10, 10]
        assert data.images.min() >= 0.0 and data.images.max() <= 1.0

    def test_too_many_classes_rejected(self):
        with pytest.raises(DatasetFormatError):
            generate_synthetic(10, num_classes=11)

    def test_split_is_disjoint_and_deterministic(self, tiny_dataset):
        train, test = split_dataset(tiny_dataset, 15, seed=4)
        assert len(train) == 45 and len(test) == 15
        assert not set(train.ids) & set(test.ids)
        again_train, _ = split_dataset(tiny_dataset, 15, seed=4)
        np.testing.assert_array_equal(train.ids, again_train.ids)

    def test_excluding_label(self, tiny_dataset):
        pool = tiny_dataset.excluding_label(2)
        assert 2 not in set(pool.labels)
        assert len(pool) == 40

    def test_ingest_synthetic_with_generator_config(self, tmp_path):
        config = tmp_path / "gen.json"
        config.write_text('{"n": 12, "seed": 5, "num_classes": 3, "image_size": 16}', encoding="utf-8")
        data = ingest_dataset(config, DatasetFormat.SYNTHETIC)
        assert len(data) == 12 and data.num_classes == 3

    def test_broken_generator_config_reports_offset(self, tmp_path):
        config = tmp_path / "gen.json"
        config.write_text('{"n": 12,,}', encoding="utf-8")
        with pytest.raises(DatasetFormatError) as excinfo:
            ingest_dataset(config, "synthetic")
        assert excinfo.value.offset is not None


class TestIdxFormat:

    def test_uint8_round_trip(self, tmp_path):
        array = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
        write_idx(tmp_path / "a.idx", array)
        np.testing.assert_array_equal(read_idx(tmp_path / "a.idx"), array)

    def test_float_round_trip(self, tmp_path):
        array = np.random.default_rng(0).uniform(size=(3, 5)).astype(np.float32)
        write_idx(tmp_path / "f.idx", array)
        np.testing.assert_array_equal(read_idx(tmp_path / "f.idx"), array)

    def test_truncated_payload_reports_offset(self, tmp_path):
        path = tmp_path / "t.idx"
        write_idx(path, np.zeros((4, 4), dtype=np.uint8))
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(DatasetFormatError) as excinfo:
            read_idx(path)
        assert excinfo.value.offset == 12 + 13

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.idx"
        path.write_bytes(struct.pack(">BBBB", 1, 0, 0x08, 1) + struct.pack(">I", 0))
        with pytest.raises(DatasetFormatError) as excinfo:
            read_idx(path)
        assert excinfo.value.offset == 0

    def test_ingest_idx_directory(self, tmp_path):
        images = (np.random.default_rng(1).uniform(size=(5, 8, 8)) * 255).astype(np.uint8)
        write_idx(tmp_path / "images.idx", images)
        write_idx(tmp_path / "labels.idx", np.array([0, 1, 2, 1, 0], dtype=np.uint8))
        data = ingest_dataset(tmp_path, "idx", num_classes=3)
        assert data.images.shape == (5, 3, 8, 8)
        np.testing.assert_allclose(data.images[:, 0], images / 255.0)

    def test_label_out_of_range(self, tmp_path):
        write_idx(tmp_path / "images.idx", np.zeros((2, 4, 4), dtype=np.uint8))
        write_idx(tmp_path / "labels.idx", np.array([0, 7], dtype=np.uint8))
        with pytest.raises(DatasetFormatError):
            ingest_dataset(tmp_path, "idx", num_classes=3)


class TestPngDirectory:

    def test_labels_come_from_directory_names(self, tmp_path):
        rng = np.random.default_rng(2)
        for label in (0, 1):
            for k in range(2):
                file_processor.save_image_png(rng.uniform(size=(3, 8, 8)), tmp_path / str(label) / f"{k}.png")
        data = ingest_dataset(tmp_path, "png_dir")
        assert sorted(data.labels.tolist()) == [0, 0, 1, 1]
        assert data.num_classes == 2

    def test_non_integer_class_directory(self, tmp_path):
        (tmp_path / "cats").mkdir()
        with pytest.raises(DatasetFormatError):
            ingest_dataset(tmp_path, "png_dir")


class TestModelStorage:

    def test_round_trip_is_bit_exact(self, tmp_path):
        model = build_model(SMALL_ARCHITECTURE, (3, 8, 8), num_classes=3, seed=2)
        path, meta = save_model(model, tmp_path / "m.pfm")
        assert meta == sidecar_path(path)
        loaded = load_model(path)
        assert loaded.checksum() == model.checksum()
        for name, value in model.params.items():
            np.testing.assert_array_equal(loaded.params[name], value)
            assert loaded.params[name].dtype == value.dtype
        assert not next(iter(loaded.params.values())).flags.writeable

    def test_corrupted_file_fails_checksum(self, tmp_path):
        model = build_model(SMALL_ARCHITECTURE, (3, 8, 8), num_classes=3)
        path, _ = save_model(model, tmp_path / "m.pfm")
        payload = bytearray(path.read_bytes())
        payload[20] ^= 0xFF
        path.write_bytes(bytes(payload))
        with pytest.raises(ModelFormatError):
            load_model(path)

    def test_missing_sidecar(self, tmp_path):
        model = build_model(SMALL_ARCHITECTURE, (3, 8, 8), num_classes=3)
        path, meta = save_model(model, tmp_path / "m.pfm")
        meta.unlink()
        with pytest.raises(ModelFormatError):
            load_model(path)

    def test_encode_preserves_order(self):
        params = {"b": np.ones(2, dtype=np.float32), "a": np.zeros((2, 2), dtype=np.float64)}
        decoded = decode_parameters(encode_parameters(params))
        assert list(decoded) == ["b", "a"]
        assert decoded["a"].dtype == np.float64


class TestNetwork:

    def test_dense_before_flatten_rejected(self):
        with pytest.raises(ShapeError):
            build_model((LayerSpec("dense"),), (3, 8, 8), num_classes=2)

    def test_predict_returns_distribution(self, tiny_conv_model):
        image = np.random.default_rng(0).uniform(size=(3, 4, 4))
        label, probs = predict(tiny_conv_model, image)
        assert probs.sum() == pytest.approx(1.0, abs=1e-6)
        assert label == int(np.argmax(probs))

    def test_predict_rejects_wrong_shape(self, tiny_conv_model):
        with pytest.raises(ShapeError):
            predict(tiny_conv_model, np.zeros((3, 8, 8)))

    def test_linear_stub_decision_rule(self, linear_stub):
        assert predict(linear_stub, np.full((3, 16, 16), 0.9))[0] == 1
        assert predict(linear_stub, np.full((3, 16, 16), 0.1))[0] == 0


class TestTraining:

    def test_training_is_deterministic_and_learns(self, tiny_dataset):
        config = TrainConfig(epochs=3, learning_rate=0.05, batch_size=16, seed=3,
                             dtype="float64", architecture=SMALL_ARCHITECTURE)
        first = train_classifier(tiny_dataset, config, progress=False)
        second = train_classifier(tiny_dataset, config, progress=False)
        assert first.checksum() == second.checksum()
        history = first.metadata["history"]
        assert len(history) == 3
        assert history[-1]["loss"] < history[0]["loss"]

    def test_empty_training_set(self, tiny_dataset):
        with pytest.raises(EmptyPoolError):
            train_classifier(tiny_dataset.subset(np.array([], dtype=np.int64)), TrainConfig(epochs=1), progress=False)

    def test_checkpoints_written_per_epoch(self, tiny_dataset, tmp_path):
        config = TrainConfig(epochs=2, batch_size=32, architecture=SMALL_ARCHITECTURE)
        train_classifier(tiny_dataset, config, checkpoint_dir=tmp_path, progress=False)
        assert sorted(p.name for p in tmp_path.glob("*.pfm")) == ["epoch_001.pfm", "epoch_002.pfm"]

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)
