import pytest

from pointnu.config import (VARIANTS, ConfigError, RunConfig, TrainConfig, default_keys, desk_config,
                            dump_config, load_config, parse_value)


def test_defaults_schedule():
    tc = TrainConfig()
    assert (tc.epochs, tc.base_lr, tc.lr_drops, tc.weight_decay) == (100, 1e-4, (80, 90), 1e-4)
    assert tc.lr_at(0) == 1e-4 and tc.lr_at(79) == 1e-4
    assert tc.lr_at(85) == pytest.approx(1e-5, rel=1e-12)
    assert tc.lr_at(95) == pytest.approx(1e-6, rel=1e-12)


def test_unknown_key_names_it(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("lrr: 0.1\n")
    with pytest.raises(ConfigError) as err:
        load_config(p)
    assert err.value.key == "lrr" and "lrr" in str(err.value)


@pytest.mark.parametrize("key,value", [("batch_size", 0), ("crop_size", 100), ("lr_drops", [200]),
                                       ("target_mode", "boxes"), ("variant", "XL")])
def test_invalid_values(key, value):
    with pytest.raises(ConfigError) as err:
        RunConfig.from_flat({key: value})
    assert err.value.key == key


def test_variants_and_explicit_override():
    s = RunConfig.from_flat({"variant": "S"})
    assert s.model.head_depth == 4 and s.model.head_channels == 128
    assert RunConfig.from_flat({"variant": "S", "head_depth": 2}).model.head_depth == 2
    assert RunConfig().model.head_depth == VARIANTS["default"]["head_depth"]


def test_round_trip(tmp_path):
    cfg = desk_config(seed=5, lr_drops=[3, 7], aug_blur_sigma=[0.2, 0.8])
    back = load_config(dump_config(cfg, tmp_path / "c.yaml"))
    assert back.to_flat() == cfg.to_flat()
    assert set(default_keys()) == set(cfg.to_flat())


def test_parse_value():
    assert parse_value("true") is True and parse_value("[80, 90]") == [80, 90]


def test_exponent_notation_is_numeric(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("base_lr: 1e-4\nweight_decay: 5e-5\n")
    cfg = load_config(p, {"conf": parse_value("2e-1")})
    assert cfg.train.base_lr == 1e-4 and cfg.train.weight_decay == 5e-5 and cfg.infer.conf == 0.2
    with pytest.raises(ConfigError) as err:
        RunConfig.from_flat({"epochs": "many"})
    assert err.value.key == "epochs"


def test_overrides_beat_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("epochs: 95\nseed: 1\n")
    cfg = load_config(p, {"seed": 9})
    assert (cfg.train.epochs, cfg.train.seed) == (95, 9)
