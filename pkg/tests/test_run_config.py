"""
Unit tests for run_config.py
"""

import pytest

from run_config import ConfigError, RunConfig


def test_defaults_follow_published_settings():
    """Five blocks, five heads, window 2, dropout 0.2 and loss weights 0.1 / 0.05."""
    config = RunConfig().validate()
    assert (config.mpt_layers, config.heads, config.window, config.rgcn_layers) == (5, 5, 2, 1)
    assert (config.dropout, config.lambda1, config.lambda2, config.tau) == (0.2, 0.1, 0.05, 0.07)
    assert config.bottleneck == 25
    assert config.ffn_width == 400


def test_learning_rate_follows_profile():
    """The profile picks 1e-4 or 3e-4 unless lr is set explicitly."""
    assert RunConfig(profile="iemocap").learning_rate == 1e-4
    assert RunConfig(profile="meld").learning_rate == 3e-4
    assert RunConfig(profile="custom:8,6,4,3").learning_rate == 1e-4
    assert RunConfig(profile="meld", lr=5e-3).learning_rate == 5e-3


def test_ablations_and_modalities_parse():
    """Comma lists become a flag set and canonical modality order."""
    config = RunConfig(ablate="no_ucl, no_scl", modalities="v,t").validate()
    assert config.ablations == frozenset({"no_ucl", "no_scl"})
    assert config.modality_set == ("text", "visual")


@pytest.mark.parametrize(
    "overrides, message",
    [
        ({"ablate": "no_text"}, "ablation"),
        ({"modalities": "t,x"}, "modalities"),
        ({"modalities": ""}, "modalities"),
        ({"d": 7}, "even"),
        ({"heads": 3}, "divide"),
        ({"window": 5}, "window"),
        ({"dropout": 1.0}, "dropout"),
        ({"tau": 0.0}, "tau"),
        ({"lambda2": -1.0}, "non-negative"),
        ({"profile": "imdb"}, "profile"),
        ({"d_b": 100}, "d_b"),
    ],
)
def test_invalid_settings_rejected(overrides, message):
    """Out-of-range settings raise ConfigError naming the field."""
    with pytest.raises(ConfigError, match=message):
        RunConfig(**overrides).validate()


def test_with_overrides_ignores_none():
    """None values leave the field alone; other values replace it and are validated."""
    config = RunConfig(seed=3)
    assert config.with_overrides(seed=None, ablate="no_mpt").seed == 3
    assert config.with_overrides(seed=9).seed == 9
    with pytest.raises(ConfigError):
        config.with_overrides(window=0)


def test_text_round_trip(tmp_path):
    """to_text output reads back into an equal config."""
    config = RunConfig(profile="meld", d=20, heads=4, shuffle=False, ablate="no_rgcn", lr=2e-4)
    path = tmp_path / "run.cfg"
    path.write_text(config.to_text(), encoding="utf-8")
    assert RunConfig.from_file(path) == config


def test_from_text_comments_and_types():
    """Comments and blank lines are skipped; values are coerced to the field type."""
    config = RunConfig.from_text("# toy run\n\nd = 16   # width\nheads = 4\nshuffle = no\nlambda1 = 0.2\n")
    assert (config.d, config.heads, config.shuffle, config.lambda1) == (16, 4, False, 0.2)


@pytest.mark.parametrize(
    "text, message",
    [
        ("colour = blue\n", "unknown key"),
        ("d 16\n", "key = value"),
        ("d = sixteen\n", "cannot read"),
        ("shuffle = maybe\n", "cannot read"),
    ],
)
def test_from_text_errors_name_the_line(text, message):
    """Malformed lines are reported with their source and line number."""
    with pytest.raises(ConfigError, match=message) as excinfo:
        RunConfig.from_text(text, source="run.cfg")
    assert "run.cfg:1" in str(excinfo.value)


def test_missing_file_rejected(tmp_path):
    """A missing config path raises ConfigError."""
    with pytest.raises(ConfigError, match="not found"):
        RunConfig.from_file(tmp_path / "absent.cfg")


def test_feature_spec_from_profile():
    """The profile and speaker bound become the feature spec."""
    spec = RunConfig(profile="custom:6,5,4,3", max_speakers=3).feature_spec()
    assert (spec.d_t, spec.d_a, spec.d_v, spec.num_classes, spec.max_speakers) == (6, 5, 4, 3, 3)
