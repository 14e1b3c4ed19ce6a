import numpy as np
import pytest

from weakseg.backbone import BackboneConfig
from weakseg.config import (
    ConfigError,
    LossConfig,
    TrainConfig,
    config_hash,
    load_config,
    load_scene_spec,
    parse_config,
    parse_scene_spec,
    save_config,
    save_scene_spec,
    scene_spec_text,
)
from weakseg.pointcloud import default_scene_spec, generate_scene


class TestTrainConfig:
    def test_round_trip_preserves_hash(self, tmp_path):
        cfg = TrainConfig(
            mode="joint",
            seed=3,
            stage1_epochs=5,
            stage2_epochs=7,
            manifest=str(tmp_path / "m.txt"),
            checkpoint_dir=str(tmp_path / "runs"),
            model=BackboneConfig(levels=2, widths=(4, 6), hook_width=4, first_cell=0.5),
            losses=LossConfig(seg_c_weight=0.5, stop_gradient_original=True),
        )
        path = str(tmp_path / "run.ini")
        save_config(cfg, path)
        back = load_config(path)
        assert back == cfg
        assert config_hash(back) == config_hash(cfg)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config("[run]\nmode = baseline\nbogus = 1\n")

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="unknown config section"):
            parse_config("[experiment]\nx = 1\n")

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigError, match="unknown mode"):
            parse_config("[run]\nmode = turbo\n")

    def test_bad_fraction_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("[data]\nweak_fraction = 1.5\n")

    def test_relative_paths_resolve_against_config_dir(self, tmp_path):
        path = tmp_path / "exp" / "run.ini"
        path.parent.mkdir()
        path.write_text("[data]\nmanifest = data/manifest.txt\n")
        cfg = load_config(str(path))
        assert cfg.manifest == str(tmp_path / "exp" / "data" / "manifest.txt")

    def test_defaults_parse_cleanly(self):
        cfg = parse_config("")
        assert cfg.mode == "csfr-isfr"
        assert cfg.optimizer.learning_rate == 0.01
        assert cfg.optimizer.momentum == 0.98


class TestSceneSpecFile:
    def test_round_trip(self, tmp_path):
        spec = default_scene_spec(6)
        path = str(tmp_path / "spec.ini")
        save_scene_spec(spec, path)
        back = load_scene_spec(path)
        assert back == spec
        # and it still drives the generator deterministically
        a = generate_scene(spec, 4)
        b = generate_scene(back, 4)
        np.testing.assert_array_equal(a.positions, b.positions)

    def test_class_order_is_file_order(self):
        spec = parse_scene_spec(scene_spec_text(default_scene_spec(7)))
        assert [r.name for r in spec.classes] == [
            "floor", "ceiling", "wall", "table", "chair", "column", "clutter",
        ]

    def test_missing_required_key(self):
        with pytest.raises(ConfigError):
            parse_scene_spec("[class.floor]\nkind = floor\n")

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            parse_scene_spec("[scene]\ngravity = 9.8\n")
