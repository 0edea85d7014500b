import pytest

from urpa.config import ConfigError, default_config, load_config


def test_defaults_are_valid():
    cfg = default_config()
    assert cfg.adapt.k_shots * 10 <= cfg.n_target_pool
    assert cfg.pseudo_group_size == cfg.grpo.group_size
    assert cfg.adapt_grpo().seed == cfg.seed
    src = cfg.source_grpo()
    assert src.max_steps == cfg.source_steps and src.epochs * cfg.n_source >= cfg.source_steps * cfg.grpo.batch_size


def test_overrides():
    cfg = default_config().with_overrides(**{"seed": 4, "adapt.gamma": 5.0, "target.annotation_bias": 0.0})
    assert cfg.seed == 4 and cfg.adapt.gamma == 5.0 and cfg.target.annotation_bias == 0.0
    assert cfg.adapt_grpo().seed == 4


def test_include_and_override(tmp_path):
    (tmp_path / "base.toml").write_text("seed = 7\nn_source = 500\n[adapt]\ngamma = 2.0\n")
    (tmp_path / "run.toml").write_text('include = "base.toml"\nn_source = 800\nadapt.k_shots = 100\n')
    cfg = load_config(tmp_path / "run.toml")
    assert (cfg.seed, cfg.n_source, cfg.adapt.gamma, cfg.adapt.k_shots) == (7, 800, 2.0, 100)


@pytest.mark.parametrize(
    "text, match",
    [
        ("nonsense = 1\n", "unknown top-level"),
        ("[adapt]\nfoo = 1\n", r"unknown key\(s\) in \[adapt\]"),
        ("adapt.k_shots = 300\n", "few-shot"),
        ("adapt.k_shots = 3000\n", "exceeds"),
        ("target.profile_length = 64\n", "share"),
        ("adapt.gamma = -1.0\n", "adapt"),
        ("theorem_G = [1, 8]\n", "theorem_G"),
        ("n_source = 0\n", "n_source"),
        ("seed = \n", "config"),
    ],
)
def test_invalid_configs(tmp_path, text, match):
    (tmp_path / "config.toml").write_text(text)
    with pytest.raises(ConfigError, match=match):
        load_config(tmp_path / "config.toml")


def test_include_cycle_and_missing(tmp_path):
    (tmp_path / "a.toml").write_text('include = "b.toml"\n')
    (tmp_path / "b.toml").write_text('include = "a.toml"\n')
    with pytest.raises(ConfigError, match="cycle"):
        load_config(tmp_path / "a.toml")
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.toml")


def test_canonical_json_round_trip():
    import json

    from urpa.config import from_dict

    cfg = default_config()
    assert from_dict(json.loads(cfg.canonical_json())) == cfg
