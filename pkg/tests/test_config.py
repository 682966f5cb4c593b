import pytest

from promptrecon.config import (
    MODES,
    RunConfig,
    apply_overrides,
    derive_seed,
    dump_config,
    flatten,
    load_config,
)


def test_defaults_and_flat_keys():
    flat = RunConfig().flat()
    assert flat["mode"] == "full"
    assert "tuner.lam" in flat and "model.n_prompt" in flat and "world.scene_seed" in flat


def test_overrides_coerce_strings():
    cfg = apply_overrides(RunConfig(), {"tuner.lr": "0.01", "tuner.enable_local": "false", "model.D": "32"})
    assert cfg.tuner.lr == 0.01
    assert cfg.tuner.enable_local is False
    assert cfg.model.D == 32


@pytest.mark.parametrize("key", ["tuner.nope", "model", "mode.x", "bogus"])
def test_unknown_keys_rejected(key):
    with pytest.raises(KeyError):
        apply_overrides(RunConfig(), {key: "1"})


def test_bad_mode_rejected():
    with pytest.raises(ValueError):
        apply_overrides(RunConfig(), {"mode": "turbo"})
    assert set(MODES) == {"baseline", "local", "global", "full"}


def test_toml_nested_and_dotted(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('mode = "local"\ntuner.lam = 0.25\n[world]\nscene_seed = 9\n')
    cfg = load_config(p)
    assert (cfg.mode, cfg.tuner.lam, cfg.world.scene_seed) == ("local", 0.25, 9)
    # flags win over the file
    cfg = load_config(p, {"tuner.lam": "0.75"})
    assert cfg.tuner.lam == 0.75


def test_dump_round_trip(tmp_path):
    cfg = apply_overrides(RunConfig(), {"mode": "global", "tuner.iters_per_keyframe": 3, "output_dir": 'a "b"'})
    dump_config(cfg, tmp_path / "c.toml")
    back = load_config(tmp_path / "c.toml")
    assert back.flat() == cfg.flat()


def test_seed_splitting():
    a = derive_seed(0, "tuner")
    assert a == derive_seed(0, "tuner")
    assert a != derive_seed(0, "keyframe-buffer")
    assert a != derive_seed(1, "tuner")


def test_flatten_nested():
    assert flatten({"a": {"b": 1, "c": {"d": 2}}, "e": 3}) == {"a.b": 1, "a.c.d": 2, "e": 3}
