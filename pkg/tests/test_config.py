import json

import pytest

from parereg.config import (
    AppConfig,
    AttentionConfig,
    SceneConfig,
    config_from_dict,
    config_to_dict,
    default_config,
    load_config,
)
from parereg.errors import InputError


def test_indoor_defaults():
    cfg = default_config("indoor")
    assert cfg.backbone.voxel == 0.025
    assert cfg.backbone.k == 35
    assert cfg.backbone.kernels == 4
    assert cfg.estimator.tau_d == 0.1
    assert cfg.scene.noise_sigma == 0.005
    assert cfg.scene.crop_ratio == 0.3
    assert cfg.n_coarse == 256
    assert cfg.n_fine == 1000
    assert cfg.d_super == 384
    assert cfg.d_point == 255


def test_outdoor_defaults():
    cfg = default_config("outdoor")
    assert cfg.backbone.voxel == 0.3
    assert cfg.backbone.ratio == 2.5
    assert cfg.estimator.tau_d == 0.6
    assert cfg.scene.noise_sigma == 0.01
    assert cfg.thresholds.tau_r_deg == 5.0
    assert cfg.thresholds.tau_t == 2.0
    assert cfg.d_point == 63
    # shared knobs do not drift between presets
    assert cfg.backbone.k == 35
    assert cfg.n_coarse == 256


def test_unknown_preset():
    with pytest.raises(InputError, match="preset"):
        default_config("underwater")


@pytest.mark.parametrize("preset", ["indoor", "outdoor"])
def test_dict_round_trip(preset):
    cfg = default_config(preset)
    again = config_from_dict(config_to_dict(cfg))
    assert again == cfg


def test_config_dict_is_json_serializable():
    text = json.dumps(config_to_dict(default_config("outdoor")), sort_keys=True)
    assert "paper_defaults" in text


def test_unknown_top_level_key():
    with pytest.raises(InputError, match="unknown config key 'banana'"):
        config_from_dict({"banana": 1})


def test_unknown_section_key():
    with pytest.raises(InputError, match="backbone.bogus"):
        config_from_dict({"backbone": {"bogus": 3}})


def test_section_must_be_object():
    with pytest.raises(InputError, match="section 'scene'"):
        config_from_dict({"scene": [1, 2]})


def test_paper_defaults_feed_fields():
    cfg = config_from_dict(
        {
            "paper_defaults": {
                "voxel": 0.05,
                "acceptance_radius": 0.2,
                "gaussian_noise": 0.02,
                "n_fine": 500,
                "nearest_neighbors": 16,
            }
        }
    )
    assert cfg.backbone.voxel == 0.05
    assert cfg.backbone.k == 16
    assert cfg.estimator.tau_d == 0.2
    assert cfg.scene.noise_sigma == 0.02
    assert cfg.n_fine == 500
    assert cfg.n_coarse == 256


def test_specific_section_beats_paper_defaults():
    cfg = config_from_dict(
        {
            "paper_defaults": {"voxel": 0.05},
            "backbone": {"voxel": 0.07},
        }
    )
    assert cfg.backbone.voxel == 0.07


def test_bad_value_type():
    with pytest.raises(InputError, match="backbone.k"):
        config_from_dict({"backbone": {"k": "many"}})


def test_merged_values_are_validated():
    with pytest.raises(InputError, match="overlap"):
        config_from_dict({"scene": {"overlap": 0.0}})


def test_attention_head_divisibility():
    with pytest.raises(InputError, match="divide"):
        AttentionConfig(width=10, heads=4)


def test_scene_generator_whitelist():
    with pytest.raises(InputError, match="generator"):
        SceneConfig(generator="torus")


def test_budget_positivity_rejected():
    base = default_config("indoor")
    with pytest.raises(InputError, match="budgets"):
        AppConfig(
            preset=base.preset,
            backbone=base.backbone,
            attention=base.attention,
            estimator=base.estimator,
            thresholds=base.thresholds,
            loss=base.loss,
            scene=base.scene,
            n_fine=0,
        )


def test_load_config_without_file():
    assert load_config(None, "outdoor") == default_config("outdoor")


def test_load_config_file_overrides(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"matching": {"n_fine": 123}}))
    cfg = load_config(path, "indoor")
    assert cfg.n_fine == 123
    assert cfg.preset == "indoor"
    # cli preset fills in when the file does not pin one
    cfg = load_config(path, "outdoor")
    assert cfg.preset == "outdoor"


def test_load_config_file_preset_wins(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"preset": "indoor"}))
    assert load_config(path, "outdoor").preset == "indoor"


def test_load_config_bad_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{nope")
    with pytest.raises(InputError):
        load_config(path)
