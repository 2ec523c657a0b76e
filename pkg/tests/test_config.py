import json

import pytest

from lwahand.config import ConfigError, ModelConfig, config_from_dict, default_config, load_config, toy_config


@pytest.mark.parametrize("make", [default_config, toy_config])
def test_round_trip_fixed_point(make, tmp_path):
    cfg = make()
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    back = load_config(path)
    assert back == cfg and back.to_json() == cfg.to_json() and back.digest() == cfg.digest()


def test_unknown_key_names_path():
    data = default_config().to_dict()
    data["bridge"]["headz"] = 3
    with pytest.raises(ConfigError, match=r"bridge\.headz: unknown key"):
        config_from_dict(data)


def test_type_error_names_path():
    data = default_config().to_dict()
    data["encoder"]["stacks"][2]["stride"] = "two"
    with pytest.raises(ConfigError, match=r"encoder\.stacks\[2\]\.stride"):
        config_from_dict(data)


@pytest.mark.parametrize("path,value,match", [
    (("encoder", "dim"), 95, "encoder.dim"),
    (("encoder", "taps"), [3, 6, 9], "strictly increase"),
    (("bridge", "cross_mode"), "sparse", "bridge.cross_mode"),
    (("eval", "train_scale_cm"), 10.0, "train_scale_cm"),
    (("decoder", "gcn_depth"), [1, 1], "gcn_depth"),
    (("format_version",), 7, "format_version"),
])
def test_validation(path, value, match):
    data = default_config().to_dict()
    target = data
    for key in path[:-1]:
        target = target[key]
    target[path[-1]] = value
    with pytest.raises(ConfigError, match=match):
        config_from_dict(data)


def test_bad_json(tmp_path):
    (tmp_path / "c.json").write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(tmp_path / "c.json")


def test_cross_mode_per_level():
    cfg = default_config()
    assert [cfg.cross_mode_at(t) for t in range(3)] == ["dense", "dense", "separable"]


def test_partial_file_uses_defaults(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 3}))
    cfg = load_config(tmp_path / "c.json")
    assert cfg.seed == 3 and cfg.encoder == ModelConfig().encoder
