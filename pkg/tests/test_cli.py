"""
命令行入口测试：退出码与端到端流程
"""
import copy

import pytest

import main as cli
from src.batch import ExperimentRecord
from src.utils.config import config_manager
from src.utils.file_handler import file_processor


@pytest.fixture(autouse=True)
def isolated_config(monkeypatch):
    """每个测试使用独立的配置副本，不输出日志"""
    config = copy.deepcopy(config_manager.config)
    config["logging"].update(file_enabled=False, console_enabled=False)
    monkeypatch.setattr(config_manager, "config", config)
    monkeypatch.delenv("PATCHFORGE_OUT", raising=False)


def _write_records(path):
    record = ExperimentRecord(
        cell_id="base-base-t3", kind="base", variant="base", target=3, train_support={}, test_condition="full",
        bin_low=None, bin_high=None, success_rate=0.5, trials=10, successes=5, ci_low=0.2366, ci_high=0.7634,
    )
    file_processor.write_json([record.to_dict()], path)
    return path


class TestExitCodes:

    def test_missing_config_file(self, tmp_path):
        code = cli.main(["report", "--records", str(tmp_path / "r.json"),
                         "--config", str(tmp_path / "absent.yaml"), "--out-dir", str(tmp_path)])
        assert code == cli.EXIT_CONFIG

    def test_missing_records_is_runtime_error(self, tmp_path):
        code = cli.main(["report", "--records", str(tmp_path / "absent.json"), "--out-dir", str(tmp_path)])
        assert code == cli.EXIT_RUNTIME

    def test_report_from_records(self, tmp_path):
        records = _write_records(tmp_path / "records.json")
        code = cli.main(["report", "--records", str(records), "--out-dir", str(tmp_path / "out"),
                         "--formats", "csv", "json", "--stem", "r"])
        assert code == cli.EXIT_OK
        assert (tmp_path / "out" / "reports" / "r.csv").exists()
        assert (tmp_path / "out" / "reports" / "r.json").exists()

    def test_seed_flag_updates_config(self, tmp_path):
        records = _write_records(tmp_path / "records.json")
        cli.main(["report", "--records", str(records), "--out-dir", str(tmp_path), "--seed", "77",
                  "--formats", "json"])
        assert config_manager.get("experiments.seed") == 77

    def test_unknown_command_exits(self):
        with pytest.raises(SystemExit):
            cli.main(["fly"])


class TestSupportOverrides:

    def test_command_line_values_win(self):
        args = cli.build_parser().parse_args(
            ["attack", "--target", "1", "--theta-max", "0.5", "--location", "saliency_max"])
        support = cli.build_support(args, cli.TransformSupport(scale_low=0.2, scale_high=0.3))
        assert support.theta_max == 0.5
        assert (support.scale_low, support.scale_high) == (0.2, 0.3)
        assert support.location.value == "saliency_max"


@pytest.mark.slow
class TestPipeline:

    def test_train_attack_eval(self, tmp_path):
        run_config = tmp_path / "run.yaml"
        run_config.write_text(
            "dataset: {n_train: 60, n_test: 12, image_size: 16, num_classes: 3}\n"
            "training: {epochs: 1, batch_size: 16}\n"
            "attack: {iterations: 3, batch_images: 2, patch_size: 8}\n"
            "evaluation: {test_images: 6, transform_samples: 2}\n",
            encoding="utf-8",
        )
        common = ["--config", str(run_config), "--out-dir", str(tmp_path / "out"), "--seed", "5"]
        assert cli.main(["train-model", *common]) == cli.EXIT_OK
        assert (tmp_path / "out" / "models" / "model.pfm").exists()

        assert cli.main(["attack", "--target", "2", *common]) == cli.EXIT_OK
        patch_dir = tmp_path / "out" / "attack" / "t2"
        assert (patch_dir / "patch.npy").exists()
        summary = file_processor.read_json(patch_dir / "evaluation.json")
        assert 0.0 <= summary["success_rate"] <= 1.0

        assert cli.main(["eval", "--patch-dir", str(patch_dir), "--theta-max", "1.0", *common]) == cli.EXIT_OK
        trials = file_processor.read_json(patch_dir / "trials.json")
        assert all(abs(t["theta"]) <= 1.0 + 1e-9 for t in trials)
