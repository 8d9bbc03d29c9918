"""Tests for configuration loading, overrides and validation."""

import pytest
import yaml

from vidssl.config import (
    Config,
    ConfigError,
    ConfigManager,
    apply_overrides,
    load_config,
    save_config,
    validate,
)


@pytest.mark.unit
class TestConfigManager:
    """Test cases for ConfigManager."""

    def test_defaults_without_file(self):
        mgr = ConfigManager()
        assert mgr.path is None
        assert mgr.config.tracker.k == 3
        assert mgr.config.model.dim == 48
        assert mgr.config.train.seed == 0

    def test_default_config_is_valid(self):
        validate(Config())

    def test_load_sectioned_yaml(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("tracker:\n  k: 2\noptim:\n  lr: 1e-3\n", encoding="utf-8")
        mgr = ConfigManager(path)
        assert mgr.config.tracker.k == 2
        assert mgr.config.optim.lr == pytest.approx(1e-3)
        assert isinstance(mgr.config.optim.lr, float)

    def test_load_flat_yaml(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("total_steps: 7\nepsilon: 0.1\n", encoding="utf-8")
        mgr = ConfigManager(path)
        assert mgr.config.train.total_steps == 7
        assert mgr.config.tracker.epsilon == pytest.approx(0.1)

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            ConfigManager(tmp_path / "nope.yaml")

    def test_malformed_yaml_raises(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("tracker: [unclosed\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            ConfigManager(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("tracker:\n  kk: 2\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="Unknown config key"):
            ConfigManager(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("nonsense: 1\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            ConfigManager(path)

    def test_non_mapping_rejected(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("- 1\n- 2\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="mapping"):
            ConfigManager(path)

    def test_save_and_reload(self, tmp_path):
        mgr = ConfigManager()
        mgr.apply_overrides(["tracker.k=2", "data.global_scale=[0.5, 1.0]"])
        path = mgr.save(tmp_path / "out" / "cfg.yaml")
        reloaded = ConfigManager(path)
        assert reloaded.config == mgr.config

    def test_from_yaml_matches_to_yaml(self):
        mgr = ConfigManager()
        mgr.apply_overrides(["seed=11", "mask_mode=block"])
        assert ConfigManager.from_yaml(mgr.to_yaml()).config == mgr.config

    def test_to_dict_uses_lists(self):
        data = ConfigManager().to_dict()
        assert data["data"]["global_scale"] == [0.4, 1.0]
        assert yaml.safe_load(ConfigManager().to_yaml()) == data

    def test_save_without_path_raises(self):
        with pytest.raises(ConfigError):
            ConfigManager().save()


@pytest.mark.unit
class TestOverrides:
    """Test cases for --set style overrides."""

    def test_dotted_override(self):
        mgr = ConfigManager()
        mgr.apply_overrides(["train.total_steps=2"])
        assert mgr.config.train.total_steps == 2

    def test_bare_key_resolves_to_unique_section(self):
        mgr = ConfigManager()
        mgr.apply_overrides(["epsilon=0.2", "refine=false"])
        assert mgr.config.tracker.epsilon == pytest.approx(0.2)
        assert mgr.config.tracker.refine is False

    def test_integer_for_float_field_is_widened(self):
        mgr = ConfigManager()
        mgr.apply_overrides(["optim.lr=1"])
        assert mgr.config.optim.lr == 1.0
        assert isinstance(mgr.config.optim.lr, float)

    @pytest.mark.parametrize("override", [
        "tracker.k=two",
        "tracker.k=1.5",
        "tracker.refine=1",
        "model.tracker_layer=3",
        "data.global_scale=[0.4]",
    ])
    def test_mistyped_override_rejected(self, override):
        with pytest.raises(ConfigError):
            ConfigManager().apply_overrides([override])

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError, match="key=value"):
            ConfigManager().apply_overrides(["total_steps"])

    def test_unknown_override_rejected(self):
        with pytest.raises(ConfigError, match="Unknown config key"):
            ConfigManager().apply_overrides(["nonsense=1"])

    def test_unknown_dotted_key_rejected(self):
        with pytest.raises(ConfigError):
            ConfigManager().apply_overrides(["tracker.nonsense=1"])


@pytest.mark.unit
class TestValidate:
    """Test cases for cross-field validation."""

    @pytest.mark.parametrize("overrides", [
        ["optim.min_lr=1.0", "optim.lr=0.1"],
        ["train.total_steps=5", "optim.warmup_steps=5"],
        ["tracker.k=0"],
        ["tracker.k=7"],
        ["tracker.epsilon=0"],
        ["tracker.sk_tolerance=0"],
        ["tracker.sk_max_iterations=0"],
        ["head.student_temp=0"],
        ["head.out_dim=1"],
        ["train.ema_alpha=1.5"],
        ["model.heads=5"],
        ["model.patch_size=7"],
        ["model.tracker_layer=middle"],
        ["model.depth=1", "model.tracker_layer=second_last"],
        ["optim.optimizer=lamb"],
        ["tracker.mask_mode=none"],
    ])
    def test_invalid_combinations(self, overrides):
        mgr = ConfigManager()
        mgr.apply_overrides(overrides)
        with pytest.raises(ConfigError):
            mgr.validate()

    def test_k_above_heads_allowed_with_last_block_heads(self):
        mgr = ConfigManager()
        mgr.apply_overrides(["tracker.k=8", "model.last_block_heads=8"])
        mgr.validate()

    def test_tiny_config_is_valid(self, tiny_config):
        validate(tiny_config)


@pytest.mark.unit
class TestModuleFunctions:
    """Test cases for the load/override/save helpers."""

    def test_load_defaults(self):
        assert load_config().tracker.k == 3

    def test_load_validates(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("tracker:\n  k: 0\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_apply_overrides_returns_same_object(self):
        config = Config()
        assert apply_overrides(config, ["tracker.k=2", "seed=4"]) is config
        assert (config.tracker.k, config.train.seed) == (2, 4)

    def test_apply_overrides_validates(self):
        with pytest.raises(ConfigError):
            apply_overrides(Config(), ["optim.warmup_steps=500"])

    def test_save_then_load(self, tmp_path):
        config = apply_overrides(Config(), ["tracker.epsilon=0.1"])
        path = save_config(config, tmp_path / "nested" / "config.yaml")
        assert load_config(path).tracker.epsilon == pytest.approx(0.1)
