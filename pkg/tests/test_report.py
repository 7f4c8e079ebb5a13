"""
报告导出测试：CSV 数值往返、SVG 字节确定性与记录读取
"""
from pathlib import Path

import numpy as np
import pytest

from src.batch import ExperimentRecord
from src.report import emit_report, load_records, plot_binned, read_csv, records_frame, series_gid, write_csv, write_json
from src.utils.errors import ConfigError, PatchForgeError
from src.utils.file_handler import file_processor


def _binned_records():
    rng = np.random.default_rng(0)
    records = []
    for variant in ("s_o=0.1", "s_o=0.3"):
        for target in (1, 4):
            for low in (0.05, 0.25):
                rate = float(rng.uniform())
                records.append(ExperimentRecord(
                    cell_id=f"scale_up-{variant}-t{target}", kind="scale_up", variant=variant, target=target,
                    train_support={"theta_max": 0.0, "scale_low": 0.1, "scale_high": 0.5, "location": "random"},
                    test_condition=f"scale∈[{low}, {low + 0.2})", bin_low=low, bin_high=low + 0.2,
                    success_rate=rate, trials=7, successes=3, ci_low=rate / 3, ci_high=min(1.0, rate + 0.1 / 3),
                    seed=target, extra={"loss_decreased": True, "per_image_mean": rate / 7},
                ))
    return records


def _base_record(target: int = 2) -> ExperimentRecord:
    return ExperimentRecord(
        cell_id=f"base-base-t{target}", kind="base", variant="base", target=target, train_support={},
        test_condition="full", bin_low=None, bin_high=None, success_rate=0.75, trials=8, successes=6,
        ci_low=0.4, ci_high=0.93,
    )


class TestCsv:

    def test_float_columns_survive_round_trip(self, tmp_path):
        records = _binned_records()
        path = write_csv(records, tmp_path / "r.csv")
        frame = read_csv(path)
        expected = records_frame(records)
        assert list(frame.columns) == list(expected.columns)
        for column in ("success_rate", "ci_low", "ci_high", "bin_low", "bin_high", "extra_per_image_mean"):
            np.testing.assert_array_equal(frame[column].to_numpy(), expected[column].to_numpy())
        assert frame["trials"].tolist() == [7] * len(records)

    def test_train_support_columns(self):
        frame = records_frame(_binned_records())
        assert set(frame["train_scale_low"]) == {0.1}
        assert set(frame["train_location"]) == {"random"}

    def test_empty_records_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            write_csv([], tmp_path / "r.csv")
        with pytest.raises(ConfigError):
            emit_report([], tmp_path)


class TestSvg:

    def test_same_records_give_identical_bytes(self, tmp_path):
        records = _binned_records()
        first = plot_binned(records, tmp_path / "a.svg", "test scale", "scale_up")
        second = plot_binned(records, tmp_path / "b.svg", "test scale", "scale_up")
        assert first.read_bytes() == second.read_bytes()

    def test_one_series_element_per_variant(self, tmp_path):
        svg = plot_binned(_binned_records(), tmp_path / "a.svg", "test scale", "scale_up").read_text(encoding="utf-8")
        for variant in ("s_o=0.1", "s_o=0.3"):
            assert svg.count(f'id="{series_gid(variant)}"') == 1

    def test_records_without_bins(self, tmp_path):
        with pytest.raises(ConfigError):
            plot_binned([_base_record()], tmp_path / "a.svg", "x", "t")


class TestEmitReport:

    def test_all_formats(self, tmp_path):
        records = _binned_records() + [_base_record(2), _base_record(5)]
        paths = emit_report(records, tmp_path / "reports")
        assert set(paths) == {"csv", "json", "svg"}
        assert set(paths["svg"]) == {"scale_up", "base"}
        assert paths["svg"]["base"] == str(tmp_path / "reports" / "report_base.svg")
        assert all(Path(path).read_text(encoding="utf-8").lstrip().startswith("<?xml") for path in paths["svg"].values())
        assert read_csv(paths["csv"]).shape[0] == len(records)

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ConfigError):
            emit_report([_base_record()], tmp_path, formats=("csv", "xlsx"))

    def test_json_report_round_trip(self, tmp_path):
        records = _binned_records()
        path = write_json(records, tmp_path / "r.json")
        assert load_records(path) == records


class TestLoadRecords:

    def test_collects_cell_records_from_directory(self, tmp_path):
        records = _binned_records()
        file_processor.write_json([r.to_dict() for r in records[:3]], tmp_path / "scale_up" / "a" / "records.json")
        file_processor.write_json([r.to_dict() for r in records[3:]], tmp_path / "scale_up" / "b" / "records.json")
        assert load_records(tmp_path) == records

    def test_unreadable_file(self, tmp_path):
        (tmp_path / "bad.json").write_text("{not json", encoding="utf-8")
        with pytest.raises(PatchForgeError):
            load_records(tmp_path / "bad.json")
        with pytest.raises(PatchForgeError):
            load_records(tmp_path / "missing.json")
