"""Experiment configuration defaults, fast mode and hashing."""
import pytest
from pydantic import ValidationError

from varprop.config import Config, ExperimentConfig
from varprop.errors import ConfigurationError


class TestResolved:
    def test_finite_width_defaults(self):
        config = ExperimentConfig(command="finite-width").resolved()
        assert config.widths == [30, 100, 300, 1000]
        assert config.depth == 50
        assert config.networks == 30
        assert config.samples == 100

    def test_gradients_defaults(self):
        config = ExperimentConfig(command="gradients").resolved()
        assert config.widths == [3000]
        assert config.schemes == ["kaiming", "scale_bias", "kaiming+bn"]

    def test_fast_mode_caps_defaults(self):
        config = ExperimentConfig(command="gradients", fast=True).resolved()
        assert config.widths == [1000]
        assert config.networks == 15

    def test_fast_mode_keeps_explicit_network_count(self):
        config = ExperimentConfig(command="gradients", fast=True, networks=30).resolved()
        assert config.networks == 30

    def test_fast_network_floor(self):
        config = ExperimentConfig(command="init-check", fast=True).resolved()
        assert config.networks == 1

    def test_idempotent(self):
        once = ExperimentConfig(command="finite-width", fast=True).resolved()
        assert once.resolved() == once

    def test_explicit_values_win(self):
        config = ExperimentConfig(command="finite-width", widths=[8], depth=3).resolved()
        assert config.widths == [8]
        assert config.depth == 3

    def test_unknown_scheme(self):
        with pytest.raises(ConfigurationError):
            ExperimentConfig(command="gradients", schemes=["xavier"]).resolved()
        with pytest.raises(ConfigurationError):
            ExperimentConfig(command="init-check", schemes=["kaiming"]).resolved()

    @pytest.mark.parametrize("field", ["networks", "samples"])
    def test_ensembles_need_two(self, field):
        with pytest.raises(ConfigurationError):
            ExperimentConfig(command="finite-width", **{field: 1}).resolved()


class TestValidation:
    @pytest.mark.parametrize(
        "values",
        [
            {"widths": []},
            {"widths": [10, 0]},
            {"depth": 0},
            {"nodes": 8},
            {"seed": -1},
            {"samples": 0},
        ],
    )
    def test_rejected(self, values):
        with pytest.raises(ValidationError):
            ExperimentConfig(command="theory", **values)

    def test_unknown_command(self):
        with pytest.raises(ValidationError):
            ExperimentConfig(command="train")

    def test_environment_defaults(self):
        config = ExperimentConfig(command="theory")
        assert config.nodes == Config.QUADRATURE_NODES
        assert config.out == Config.OUT_DIR


class TestConfigHash:
    def test_ignores_output_and_workers(self):
        a = ExperimentConfig(command="theory", out="a", workers=1)
        b = ExperimentConfig(command="theory", out="b", workers=4)
        assert a.config_hash() == b.config_hash()
        assert len(a.config_hash()) == 16

    def test_depends_on_seed(self):
        a = ExperimentConfig(command="theory", seed=0)
        b = ExperimentConfig(command="theory", seed=1)
        assert a.config_hash() != b.config_hash()

    def test_database_url_defaults_to_output_directory(self, monkeypatch):
        monkeypatch.setattr(Config, "DATABASE_URL", None)
        assert Config.database_url("out") == "sqlite:///out/runs.db"
