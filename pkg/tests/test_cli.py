import json
import os

import pytest

from weakseg.cli import main
from weakseg.config import save_config, save_scene_spec
from weakseg.pointcloud import default_scene_spec, read_cloud, read_manifest
from weakseg.backbone import BackboneConfig
from weakseg.config import OptimizerConfig, TrainConfig


def write_spec(tmp_path, num_classes=5):
    from dataclasses import replace

    spec = replace(default_scene_spec(num_classes), density=14.0, extent=(4.0, 3.0, 2.4))
    path = str(tmp_path / "spec.ini")
    save_scene_spec(spec, path)
    return path


def write_run_config(tmp_path, data_dir, **overrides):
    cfg = TrainConfig(
        mode=overrides.pop("mode", "csfr-isfr"),
        stage1_epochs=overrides.pop("stage1_epochs", 1),
        stage2_epochs=overrides.pop("stage2_epochs", 1),
        steps_per_epoch=2,
        checkpoint_dir=str(tmp_path / "runs"),
        manifest=os.path.join(data_dir, "manifest.txt"),
        weak_fraction=0.10,
        input_cell=0.7,
        model=BackboneConfig(levels=2, widths=(6, 8), hook_width=6, kernel_points=4, first_cell=0.9),
        optimizer=OptimizerConfig(0.01, 0.9, grad_clip=5.0),
        **overrides,
    )
    path = str(tmp_path / "run.ini")
    save_config(cfg, path)
    return path, cfg


class TestHelpAndUsage:
    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0
        assert "gen-data" in capsys.readouterr().out

    def test_missing_required_flag_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            main(["train"])
        assert exc.value.code == 2

    def test_unknown_command_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2


class TestGenData:
    def test_writes_scenes_and_manifest(self, tmp_path, capsys):
        spec_path = write_spec(tmp_path)
        out = str(tmp_path / "data")
        assert main(["gen-data", "--spec", spec_path, "--out", out, "--scenes", "5", "--seed", "3"]) == 0
        entries = read_manifest(os.path.join(out, "manifest.txt"))
        assert len(entries) == 5
        assert sum(1 for split, _ in entries if split == "test") == 1
        cloud = read_cloud(os.path.join(out, entries[0][1]))
        assert cloud.num_classes == 5

    def test_missing_spec_is_single_line_error(self, tmp_path, capsys):
        rc = main(["gen-data", "--spec", str(tmp_path / "nope.ini"), "--out", str(tmp_path), "--scenes", "1"])
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("error: ") and err.count("\n") == 1


class TestFullPipeline:
    def test_gen_train_eval_export(self, tmp_path, capsys):
        spec_path = write_spec(tmp_path)
        data_dir = str(tmp_path / "data")
        assert main(["gen-data", "--spec", spec_path, "--out", data_dir, "--scenes", "4", "--seed", "0"]) == 0
        config_path, cfg = write_run_config(tmp_path, data_dir)
        assert main(["train", "--config", config_path]) == 0
        final = os.path.join(cfg.checkpoint_dir, "final.ckpt")
        assert os.path.exists(final)

        report_path = str(tmp_path / "report.json")
        assert main([
            "eval", "--ckpt", final, "--split", "test", "--branch", "basic",
            "--report", report_path,
        ]) == 0
        report = json.load(open(report_path))
        assert report["branch"] == "basic"
        assert 0.0 <= report["miou"] <= 1.0
        assert report["module_reads"] == {"cross_realloc": 0, "self_realloc": 0}

        # intra branch works on the final (isfr-stage) checkpoint
        assert main([
            "eval", "--ckpt", final, "--split", "test", "--branch", "intra",
            "--report", str(tmp_path / "intra.json"),
        ]) == 0

        # affinity export against a generated scene file
        entries = read_manifest(os.path.join(data_dir, "manifest.txt"))
        crop_file = os.path.join(data_dir, entries[0][1])
        ply_path = str(tmp_path / "affinity.ply")
        assert main([
            "export-affinity", "--ckpt", final, "--crop", crop_file,
            "--point", "10", "--out", ply_path,
        ]) == 0
        text = open(ply_path).read()
        assert text.startswith("ply")
        assert "element vertex" in text

    def test_resume_continues(self, tmp_path):
        spec_path = write_spec(tmp_path)
        data_dir = str(tmp_path / "data")
        main(["gen-data", "--spec", spec_path, "--out", data_dir, "--scenes", "3", "--seed", "0"])
        config_path, cfg = write_run_config(tmp_path, data_dir, mode="baseline")
        assert main(["train", "--config", config_path]) == 0
        final = os.path.join(cfg.checkpoint_dir, "final.ckpt")
        # resuming from the finished run is a no-op rewrite of final.ckpt
        assert main(["train", "--config", config_path, "--resume", final]) == 0

    def test_eval_cross_without_weight_errors(self, tmp_path, capsys):
        spec_path = write_spec(tmp_path)
        data_dir = str(tmp_path / "data")
        main(["gen-data", "--spec", spec_path, "--out", data_dir, "--scenes", "3", "--seed", "0"])
        config_path, cfg = write_run_config(tmp_path, data_dir, mode="baseline")
        main(["train", "--config", config_path])
        final = os.path.join(cfg.checkpoint_dir, "final.ckpt")
        rc = main([
            "eval", "--ckpt", final, "--split", "test", "--branch", "cross",
            "--report", str(tmp_path / "r.json"),
        ])
        assert rc == 1
        assert "cross-reallocation" in capsys.readouterr().err
